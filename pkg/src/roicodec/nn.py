"""Module/parameter plumbing on top of :mod:`roicodec.tensor`."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, get_default_dtype, layer_norm


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def _is_child(value) -> bool:
    if isinstance(value, (Parameter, Module)):
        return True
    return isinstance(value, list) and bool(value) and all(isinstance(v, Module) for v in value)


class Module:
    """Container that discovers parameters and sub-modules in attribute order."""

    def __setattr__(self, key, value):
        if _is_child(value):
            order = self.__dict__.setdefault("_order", [])
            if key not in order:
                order.append(key)
        object.__setattr__(self, key, value)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key in self.__dict__.get("_order", []):
            val = self.__dict__[key]
            if isinstance(val, list):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v
            else:
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Linear(Module):
    """Affine map over the last axis: ``x @ weight + bias`` (weight is ``[in, out]``)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std))
        if bias:
            self.bias = Parameter(np.zeros(d_out))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int | None = None):
        fan_in = c_in * k * k
        self.weight = Parameter(rng.uniform(-1, 1, size=(c_out, c_in, k, k)) / np.sqrt(fan_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


def count_params(module: Module) -> int:
    """Exact number of scalar parameters."""
    return int(sum(p.size for p in module.parameters()))
