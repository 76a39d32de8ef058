"""Dense tensors with a dynamic reverse-mode tape.

Every op records a closure that maps the output gradient to input gradients.
``Tensor.backward`` sorts the recorded graph topologically and sweeps it in
reverse. Gradients are plain numpy arrays; only the forward graph is taped.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

__all__ = [
    "Tensor",
    "DimensionError",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "avg_pool2d",
    "upsample_nearest",
    "layer_norm",
    "softmax",
    "matmul",
    "round_half_away",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.dtype(np.float32)
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _st().dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (platform independent)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array that optionally participates in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape --------------------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data, (self, other), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b))
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data, (self, other), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b))
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (
                _unbroadcast(g * y, x.shape) if self.requires_grad else None,
                _unbroadcast(g * x, y.shape) if other.requires_grad else None,
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(
            out,
            (self, other),
            lambda g: (
                _unbroadcast(g / y, x.shape) if self.requires_grad else None,
                _unbroadcast(-g * out / y, y.shape) if other.requires_grad else None,
            ),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- unary math ---------------------------------------------------------
    def exp(self) -> "Tensor":
        # saturate instead of overflowing to inf
        hi = np.log(np.finfo(self.dtype).max) - 1.0
        out = np.exp(np.minimum(self.data, hi))
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1 - out * out),))

    def sigmoid(self) -> "Tensor":
        out = special.expit(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1 - out),))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.logaddexp(0, x).astype(x.dtype, copy=False)
        return Tensor._make(out, (self,), lambda g: (g * special.expit(x),))

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),))

    def gelu(self) -> "Tensor":
        x = self.data
        cdf = special.ndtr(x)
        out = x * cdf

        def back(g):
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
            return (g * (cdf + x * pdf).astype(x.dtype, copy=False),)

        return Tensor._make(out, (self,), back)

    def normal_cdf(self) -> "Tensor":
        """Standard normal CDF, elementwise."""
        x = self.data
        out = special.ndtr(x)

        def back(g):
            return (g * (np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)).astype(x.dtype, copy=False),)

        return Tensor._make(out, (self,), back)

    def clamp_min(self, lo: float) -> "Tensor":
        """max(x, lo); gradient flows only where x > lo."""
        x = self.data
        return Tensor._make(np.maximum(x, lo), (self,), lambda g: (g * (x > lo),))

    def clamp(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * ((x > lo) & (x < hi)),))

    def round_ste(self) -> "Tensor":
        """Round forward, identity backward."""
        return Tensor._make(round_half_away(self.data), (self,), lambda g: (g,))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops --------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),))

    permute = transpose

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx) -> "Tensor":
        shape, dtype = self.shape, self.dtype
        keys = idx if isinstance(idx, tuple) else (idx,)
        advanced = any(isinstance(k, (list, np.ndarray, Tensor)) for k in keys)
        if advanced:
            idx = tuple(k.data.astype(np.intp) if isinstance(k, Tensor) else k for k in keys)

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return Tensor._make(np.asarray(self.data[idx]), (self,), back)

    def roll(self, shifts: Sequence[int], axes: Sequence[int]) -> "Tensor":
        shifts, axes = tuple(shifts), tuple(axes)
        neg = tuple(-s for s in shifts)
        return Tensor._make(np.roll(self.data, shifts, axes), (self,), lambda g: (np.roll(g, neg, axes),))

    def pad(self, pads: Sequence[tuple[int, int]], mode: str = "constant") -> "Tensor":
        """Pad with zeros (``constant``) or by edge replication (``edge``)."""
        pads = tuple(tuple(p) for p in pads)
        x = self.data
        out = np.pad(x, pads, mode=mode)

        def back(g):
            if mode == "constant":
                sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape))
                return (g[sl],)
            for ax, (lo, hi) in enumerate(pads):
                if lo == 0 and hi == 0:
                    continue
                n = g.shape[ax] - lo - hi
                core = np.take(g, range(lo, lo + n), axis=ax).copy()
                first = [slice(None)] * g.ndim
                first[ax] = slice(0, 1)
                last = [slice(None)] * g.ndim
                last[ax] = slice(n - 1, n)
                core[tuple(first)] += np.take(g, range(0, lo), axis=ax).sum(axis=ax, keepdims=True)
                core[tuple(last)] += np.take(g, range(lo + n, lo + n + hi), axis=ax).sum(axis=ax, keepdims=True)
                g = core
            return (g,)

        return Tensor._make(out, (self,), back)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_default_dtype()))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(x @ y, (a, b), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; ``-inf`` logits map to exact zeros."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data
    out = xhat * gm + beta.data
    lead = tuple(range(d.ndim - 1))

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gm
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), back)


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = w.shape[2]
    if k > x.shape[2] + 2 * pad or w.shape[3] > x.shape[3] + 2 * pad:
        raise DimensionError(f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation, NCHW input, OIkk kernel -> N O H' W'."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N C H' W' kh kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N H' W' O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g: np.ndarray, w: np.ndarray, in_shape: tuple, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``_conv_fwd`` with respect to its input."""
    n, c, h, wd = in_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    gx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    # g: N O H' W'; w: O C kh kw
    contrib = np.tensordot(g, w, axes=([1], [0]))  # N H' W' C kh kw
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + wd]
    return gx


def _conv_bwd_kernel(x: np.ndarray, g: np.ndarray, kshape: tuple, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = kshape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, : g.shape[2], : g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O C kh kw


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW tensors."""
    xd, wd = x.data, kernel.data
    _check_conv(xd, wd, stride, pad)
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"input has {xd.shape[1]} channels, kernel expects {wd.shape[1]}")
    out = _conv_fwd(xd, wd, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def back(g):
        gx = _conv_bwd_input(g, wd, xd.shape, stride, pad) if x.requires_grad else None
        gw = _conv_bwd_kernel(xd, g, wd.shape, stride, pad) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, back)


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, output_pad: int = 0
) -> Tensor:
    """Transposed convolution; ``kernel`` is laid out ``[C_in, C_out, k, k]``."""
    xd, wd = x.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[0]:
        raise DimensionError(f"conv_transpose2d shape mismatch: {xd.shape} vs {wd.shape}")
    n, _, h, w = xd.shape
    k = wd.shape[2]
    ho = (h - 1) * stride - 2 * pad + k + output_pad
    wo = (w - 1) * stride - 2 * pad + k + output_pad
    out_shape = (n, wd.shape[1], ho, wo)
    # transposed conv == input-adjoint of a forward conv whose kernel is [C_out, C_in, k, k]
    out = _conv_bwd_input_full(xd, wd, out_shape, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def back(g):
        gx = _conv_fwd(g, wd, stride, pad)[:, :, :h, :w] if x.requires_grad else None
        gw = None
        if kernel.requires_grad:
            gw = _conv_bwd_kernel(g, xd, wd.shape, stride, pad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, back)


def _conv_bwd_input_full(g: np.ndarray, w: np.ndarray, out_shape: tuple, stride: int, pad: int) -> np.ndarray:
    """Like ``_conv_bwd_input`` but tolerant of output sizes not reachable by a forward conv."""
    n, c, h, wd = out_shape
    k = w.shape[2]
    hi, wi = g.shape[2:]
    hp = max(h + 2 * pad, (hi - 1) * stride + k)
    wp = max(wd + 2 * pad, (wi - 1) * stride + k)
    gx = np.zeros((n, c, hp, wp), dtype=g.dtype)
    contrib = np.tensordot(g, w, axes=([1], [0]))  # N H W C_out k k
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * (hi - 1) + 1 : stride, j : j + stride * (wi - 1) + 1 : stride] += (
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(gx[:, :, pad : pad + h, pad : pad + wd])


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling on NCHW tensors."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = 1.0 / (k * k)

    def back(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * scale, (n, c, h // k, k, w // k, k))
        return (gx.reshape(n, c, h, w).astype(x.dtype, copy=False),)

    return Tensor._make(out, (x,), back)


def upsample_nearest(x: Tensor, k: int) -> Tensor:
    """Repeat each pixel of an NCHW tensor into a ``k x k`` block."""
    if k == 1:
        return x
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, k, w, k)).reshape(n, c, h * k, w * k)

    def back(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return Tensor._make(np.ascontiguousarray(out), (x,), back)
