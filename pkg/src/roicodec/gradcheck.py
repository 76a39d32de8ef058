"""Central finite-difference checks for the autodiff tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(
    loss_fn: Callable[[], Tensor], t: Tensor, step: float = 1e-4, indices: np.ndarray | None = None
) -> np.ndarray:
    """Central differences of the scalar ``loss_fn()`` w.r.t. entries of ``t``."""
    flat = t.data.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.empty(len(indices), dtype=np.float64)
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn().data)
        flat[i] = orig - step
        down = float(loss_fn().data)
        flat[i] = orig
        out[k] = (up - down) / (2 * step)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Relative error between tape gradients and finite differences, per tensor.

    Tensors must be 64-bit. With ``max_entries`` only a seeded random subset
    of each tensor's entries is differenced.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    errors = []
    for t in tensors:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            idx = np.arange(t.size)
        num = numeric_grad(loss_fn, t, step, idx)
        errors.append(relative_error(analytic[idx], num))
    return errors


def check_directional(
    loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-4, seed: int = 0
) -> float:
    """Compare the tape's directional derivative along one random direction
    spanning all ``tensors`` with a central difference along it.

    Costs two extra forward passes however many parameters are involved.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    loss_fn().backward()
    dirs = [rng.normal(size=t.shape) for t in tensors]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((d * (0.0 if t.grad is None else t.grad)).sum()) for t, d in zip(tensors, dirs))
    orig = [t.data.copy() for t in tensors]
    values = []
    for sign in (1.0, -1.0):
        for t, d, o in zip(tensors, dirs, orig):
            t.data[...] = o + sign * step * d
        values.append(float(loss_fn().data))
    for t, o in zip(tensors, orig):
        t.data[...] = o
    numeric = (values[0] - values[1]) / (2 * step)
    return relative_error(np.array([analytic]), np.array([numeric]))
