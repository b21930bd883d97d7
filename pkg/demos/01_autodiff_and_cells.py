"""Walk through the tensor engine and the two recurrent cells on toy inputs.

Run with ``python demos/01_autodiff_and_cells.py``.  Everything is random
and small, so it finishes in a few seconds.
"""

import numpy as np

from anticipation import tensor as T
from anticipation.horst import HorstCell, attention_terms, horst_step
from anticipation.mpnnel import MpnnelCell
from anticipation.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# --- reverse-mode autodiff -------------------------------------------------
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
y = (T.tanh(x) * x).sum()
y.backward()
print("d/dx sum(tanh(x) * x):\n", x.grad)

# central differences agree with the tape
err = grad_check(lambda t: (T.softmax(t, axis=-1) * np.arange(3.0)).sum(), x)
print(f"softmax gradient check, relative error {err:.1e}")

# --- HORST: attention over the last S states ------------------------------
cell = HorstCell(8, rng, order=3, filter_size=3)
queue = cell.new_queue()
for t in range(5):
    frame = Tensor(rng.normal(size=(8, 4, 4)))
    h, queue = horst_step(frame, queue, cell)
_, weights, masks = attention_terms(frame, queue, cell)
print("temporal weights over the queue:", np.round(weights.data, 3))
print("spatial mask range:", float(masks[0].data.min()), "to", float(masks[0].data.max()))

# --- MPNNEL with class-token edges ---------------------------------------
mp = MpnnelCell(8, 16, 16, rng, heads=4, edge_kind="class_token", n_verbs=6, n_nouns=8)
state = None
for t in range(3):
    step = mp.step(Tensor(rng.normal(size=(8, 4, 4))), state)
    state = step.vertices
print("vertex states:", state.shape, " edge estimate:", step.edges.shape)
print("token verb logits:", np.round(step.token_logits["verb"].data, 2))
