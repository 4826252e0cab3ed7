"""Parameters, a small module base class and the standard layers."""
from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor plus the descriptor of how it was initialised."""

    __slots__ = ("init_spec",)

    def __init__(self, data, init_spec: str = "given", name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.init_spec = init_spec


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> Parameter:
    bound = math.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), f"uniform(+-sqrt(1/{fan_in}))")


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype), f"normal(0,{std}^2)")


def zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), "zeros")


def ones(shape, dtype) -> Parameter:
    return Parameter(np.ones(shape, dtype=dtype), "ones")


class Module:
    """Base class: parameters are discovered from instance attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            self.weight = zeros((d_in, d_out), dtype)
        else:
            self.weight = uniform_fan_in(rng, (d_in, d_out), d_in, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def forward(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = ones((dim,), dtype)
        self.beta = zeros((dim,), dtype)
        self.eps = eps

    def forward(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float64,
                 zero_init: bool = False):
        shape = (k, k, c_in, c_out)
        self.weight = zeros(shape, dtype) if zero_init else uniform_fan_in(rng, shape, k * k * c_in, dtype)
        self.bias = zeros((c_out,), dtype)

    def forward(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)
