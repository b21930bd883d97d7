"""Higher-order recurrent cell with space-time decomposition attention.

The cell keeps the last ``S`` hidden states in a FIFO queue.  At each step
the encoded frame is the query; every queued state is projected to a key and
a value.  A temporal branch turns pooled query/key similarities into one
softmax weight per queued state, a spatial branch turns each key into a
(0,1) location mask via :func:`spatial_filter`, and the output is the
weighted sum of masked values, projected and added back to the input.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import Conv2d, Linear, Module
from .tensor import Parameter, Tensor

DEFAULT_ORDER = 4
DEFAULT_FILTER_SIZE = 7


class StateQueue:
    """Bounded FIFO of recent states, newest last."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque[Tensor] = deque(maxlen=capacity)

    def push(self, state: Tensor) -> Tensor | None:
        """Append ``state``; return the evicted entry, if any."""
        evicted = self._entries[0] if len(self._entries) == self.capacity else None
        self._entries.append(state)
        return evicted

    @property
    def entries(self) -> list[Tensor]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._entries)

    def __bool__(self) -> bool:
        return bool(self._entries)


class SpatialFilter(Module):
    def __init__(self, rng: np.random.Generator, kernel_size: int = DEFAULT_FILTER_SIZE):
        if kernel_size % 2 == 0:
            raise ConfigError(f"spatial filter kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        bound = 1.0 / math.sqrt(2 * kernel_size * kernel_size)
        self.kernel = Parameter(rng.uniform(-bound, bound, (1, 2, kernel_size, kernel_size)).astype(np.float32))
        self.bias = Parameter(np.zeros(1, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return spatial_filter(x, self)


def spatial_filter(x: Tensor, params: SpatialFilter) -> Tensor:
    """Sigmoid-gated location map from channel max and mean, [...,C,H,W] -> [...,1,H,W]."""
    if x.ndim < 3:
        raise DimensionError(f"spatial_filter expects [...,C,H,W], got {x.shape}")
    pooled = T.concat([T.max_pool_channels(x), T.mean_pool_channels(x)], axis=-3)
    lead = pooled.shape[:-3]
    if len(lead) > 1:
        pooled = pooled.reshape((-1,) + pooled.shape[-3:])
    logits = T.conv2d(pooled, params.kernel, params.bias, padding=(params.kernel_size - 1) // 2)
    if len(lead) > 1:
        logits = logits.reshape(lead + logits.shape[-3:])
    return T.sigmoid(logits)


class HorstCell(Module):
    """Parameters of one HORST cell over states of shape [D,H,W]."""

    def __init__(self, dim: int, rng: np.random.Generator, order: int = DEFAULT_ORDER,
                 filter_size: int = DEFAULT_FILTER_SIZE, extent: tuple[int, int] | None = None):
        if not 1 <= order <= 8:
            raise ConfigError(f"order must be in 1..8, got {order}")
        self.dim = dim
        self.order = order
        self.extent = extent
        self.proj_q = Conv2d(dim, dim, 1, rng)
        self.proj_k = Conv2d(dim, dim, 1, rng)
        self.proj_v = Conv2d(dim, dim, 1, rng)
        self.proj_out = Conv2d(dim, dim, 1, rng)
        self.spatial = SpatialFilter(rng, filter_size)

    def new_queue(self) -> StateQueue:
        return StateQueue(self.order)

    def step(self, x: Tensor, queue: StateQueue) -> tuple[Tensor, StateQueue]:
        return horst_step(x, queue, self)


def _check_state(x: Tensor, p: HorstCell) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != p.dim or (p.extent and tuple(x.shape[-2:]) != tuple(p.extent)):
        want = (p.dim,) + (tuple(p.extent) if p.extent else ("H", "W"))
        raise DimensionError(f"state shape {x.shape} does not match cell extents {want}")


def attention_terms(query: Tensor, queue: StateQueue, p: HorstCell) -> tuple[Tensor, Tensor, Tensor]:
    """Return (pre-projection output, temporal weights [...,s], masks [...,s,1,H,W])."""
    states = queue.entries
    if not states:
        raise ContractError("space-time attention needs a non-empty queue; seed it first")
    for s in states:
        if s.shape != query.shape:
            raise DimensionError(f"queued state {s.shape} does not match query {query.shape}")
    lead = query.shape[:-3]
    D, H, W = query.shape[-3:]
    s = len(states)

    q = p.proj_q(query)
    stacked = T.stack(states, axis=len(lead))              # [...,s,D,H,W]
    flat = stacked.reshape((-1, D, H, W))
    keys = p.proj_k(flat)
    values = p.proj_v(flat)
    masks = spatial_filter(keys, p.spatial)                 # [(..)s,1,H,W]

    keys = keys.reshape(lead + (s, D, H, W))
    values = values.reshape(lead + (s, D, H, W))
    masks = masks.reshape(lead + (s, 1, H, W))

    q_pooled = T.global_avg_pool(q).reshape(lead + (1, D))
    k_pooled = T.global_avg_pool(keys)                      # [...,s,D]
    scores = (k_pooled * q_pooled).sum(axis=-1) * (1.0 / math.sqrt(D))
    weights = T.softmax(scores, axis=-1)                    # [...,s]

    mixed = (weights.reshape(lead + (s, 1, 1, 1)) * (masks * values)).sum(axis=len(lead))
    return mixed, weights, masks


def st_attention(query: Tensor, queue: StateQueue, p: HorstCell) -> Tensor:
    mixed, _, _ = attention_terms(query, queue, p)
    return p.proj_out(mixed)


def horst_step(x: Tensor, queue: StateQueue, p: HorstCell) -> tuple[Tensor, StateQueue]:
    """One recurrence step: h = x + attention(x, queue); push h, evicting the oldest."""
    _check_state(x, p)
    if not queue:
        queue.push(x)
    h = x + st_attention(x, queue, p)
    queue.push(h)
    return h, queue


# ---------------------------------------------------------------------------
# vector variant (object-score modality)
# ---------------------------------------------------------------------------

class HorstCell1D(Module):
    """HORST with dense maps in place of 1x1 convolutions and no spatial branch."""

    def __init__(self, dim: int, rng: np.random.Generator, order: int = DEFAULT_ORDER):
        if not 1 <= order <= 8:
            raise ConfigError(f"order must be in 1..8, got {order}")
        self.dim = dim
        self.order = order
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def new_queue(self) -> StateQueue:
        return StateQueue(self.order)

    def step(self, x: Tensor, queue: StateQueue) -> tuple[Tensor, StateQueue]:
        return horst_step_1d(x, queue, self)


def temporal_weights_1d(query: Tensor, queue: StateQueue, p: HorstCell1D) -> tuple[Tensor, Tensor]:
    """Return (pre-projection output, temporal weights) for the vector cell."""
    states = queue.entries
    if not states:
        raise ContractError("temporal attention needs a non-empty queue; seed it first")
    lead = query.shape[:-1]
    D = query.shape[-1]
    s = len(states)
    q = p.proj_q(query).reshape(lead + (1, D))
    stacked = T.stack(states, axis=len(lead))               # [...,s,D]
    keys = p.proj_k(stacked)
    values = p.proj_v(stacked)
    scores = (keys * q).sum(axis=-1) * (1.0 / math.sqrt(D))
    weights = T.softmax(scores, axis=-1)
    mixed = (weights.reshape(lead + (s, 1)) * values).sum(axis=len(lead))
    return mixed, weights


def horst_step_1d(x: Tensor, queue: StateQueue, p: HorstCell1D) -> tuple[Tensor, StateQueue]:
    if x.ndim not in (1, 2) or x.shape[-1] != p.dim:
        raise DimensionError(f"state shape {x.shape} does not match cell dim {p.dim}")
    if not queue:
        queue.push(x)
    for s in queue:
        if s.shape != x.shape:
            raise DimensionError(f"queued state {s.shape} does not match input {x.shape}")
    mixed, _ = temporal_weights_1d(x, queue, p)
    h = x + p.proj_out(mixed)
    queue.push(h)
    return h, queue
