import numpy as np

from anticipation.tensor import Tensor


def f64(a, grad: bool = False) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def set_param(param, value) -> None:
    param.data = np.array(value, dtype=param.dtype).reshape(param.shape)


def zero_module(module) -> None:
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)
