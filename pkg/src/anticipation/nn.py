"""Parameter containers and the few layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


class Module:
    """Attribute-based parameter container.

    Parameters are discovered by walking instance attributes in definition
    order, recursing into sub-modules and lists/tuples of modules, so names
    are stable and deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(T.DEFAULT_DTYPE)


class Linear(Module):
    """y = x @ weight + bias, weight stored as [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, (in_features, out_features), bound))
        self.bias = Parameter(np.zeros(out_features, dtype=T.DEFAULT_DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                         math.sqrt(6.0 / fan_in) / math.sqrt(2.0)))
        self.bias = Parameter(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE))
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding, stride=self.stride)


class GRUCell(Module):
    """Gated update h' = (1-z)*n + z*h driven by an input message."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.input_map = Linear(dim, 3 * dim, rng)
        self.hidden_map = Linear(dim, 3 * dim, rng)

    def __call__(self, message: Tensor, hidden: Tensor) -> Tensor:
        d = self.dim
        gi = self.input_map(message)
        gh = self.hidden_map(hidden)
        r = T.sigmoid(gi[..., :d] + gh[..., :d])
        z = T.sigmoid(gi[..., d:2 * d] + gh[..., d:2 * d])
        n = T.tanh(gi[..., 2 * d:] + r * gh[..., 2 * d:])
        return (1.0 - z) * n + z * hidden
