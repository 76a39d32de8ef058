"""Shared fixtures-as-functions for the unit and acceptance suites."""
import numpy as np

from roicodec.entropy import rate_bits
from roicodec.model import build_model, lambda_map
from roicodec.tensor import Tensor, default_dtype
from roicodec.training import rd_loss


def toy_model_f64(**overrides):
    with default_dtype(np.float64):
        return build_model("toy", **overrides)


def rect_mask(n: int, size: int, top: int, left: int, h: int, w: int) -> np.ndarray:
    m = np.zeros((n, 1, size, size))
    m[:, :, top : top + h, left : left + w] = 1.0
    return m


def toy_loss_fn(model, seed: int = 0, omega: float = 5.0):
    """Closure computing the full RD loss of a 64x64 batch with fixed noise."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 3, 64, 64)))
    m = Tensor(rect_mask(1, 64, 8, 20, 30, 24))
    lmap = lambda_map(m, 0.001, omega)

    def loss():
        out = model(x, m, np.random.default_rng(seed + 1))
        bits = rate_bits(*out["likelihoods"])
        return rd_loss(x, out["x_hat"], lmap, bits, 64 * 64)[0]

    return loss


def module_groups(model) -> dict[str, list]:
    """Parameters grouped by top-level submodule (list children split by index)."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if len(parts) > 1 and parts[1].isdigit() else parts[0]
        groups.setdefault(key, []).append(p)
    return groups
