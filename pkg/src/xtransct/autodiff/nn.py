"""Parameter containers and initializers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Owns parameters and child modules; names follow attribute assignment order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.values.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, dtype=None) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        bad = [
            f"{n}: checkpoint {tuple(np.shape(state[n]))} vs model {own[n].shape}"
            for n in own
            if n in state and tuple(np.shape(state[n])) != own[n].shape
        ]
        if missing or extra or bad:
            from ..errors import DimensionError

            lines = [f"missing: {m}" for m in missing] + [f"unexpected: {e}" for e in extra] + bad
            raise DimensionError("parameter mismatch:\n  " + "\n  ".join(lines))
        for n, p in own.items():
            p.values = np.array(state[n], dtype=dtype or p.dtype)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.values = p.values.astype(dtype)
            p.grad = None
        return self


def parameter(values: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def fan_uniform(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> np.ndarray:
    """Uniform init with variance ``gain**2 / fan_in``."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, gain: float = 1.0):
        super().__init__()
        self.weight = parameter(fan_uniform(rng, (n_in, n_out), n_in, dtype, gain))
        self.bias = parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.gain = parameter(np.ones(d, dtype=dtype))
        self.bias = parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dtype=np.float64, gain: float = np.sqrt(2.0)):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = parameter(fan_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype, gain))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding, bias=self.bias)
