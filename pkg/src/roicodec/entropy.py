"""Quantization, likelihood models and coder table construction."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import special

from .nn import Module, Parameter
from .tensor import Tensor, no_grad, round_half_away

LIKELIHOOD_FLOOR = 1e-9
SIGMA_MIN = 0.01
FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS
# two-sided tail mass left outside a table's explicit support
TAIL_MASS = 2.0**-16
SCALE_RATIO = 1.02
SCALE_MAX = 256.0


def quantize(values: Tensor, mode: str, offset: Tensor | np.ndarray | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """Training/coding quantizer.

    ``noise`` adds U(-0.5, 0.5); ``round`` returns ``round(v - offset) + offset``
    off the tape; ``ste`` rounds forward and passes gradients through.
    """
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an rng")
        u = rng.uniform(-0.5, 0.5, size=values.shape).astype(values.dtype)
        return values + u
    if mode == "round":
        v = values.data if isinstance(values, Tensor) else np.asarray(values)
        if offset is None:
            return Tensor(round_half_away(v))
        off = offset.data if isinstance(offset, Tensor) else np.asarray(offset)
        return Tensor(round_half_away(v - off) + off)
    if mode == "ste":
        if offset is None:
            return values.round_ste()
        return (values - offset).round_ste() + offset
    raise ValueError(f"unknown quantization mode {mode!r}")


def scale_from_raw(raw: Tensor) -> Tensor:
    """Map an unconstrained head output to a Gaussian scale ``>= SIGMA_MIN``."""
    return raw.softplus() + SIGMA_MIN


def gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Probability mass of the unit bin around ``y_hat`` under N(mu, sigma)."""
    dist = (y_hat - mu).abs()
    upper = ((0.5 - dist) / sigma).normal_cdf()
    lower = ((-0.5 - dist) / sigma).normal_cdf()
    return (upper - lower).clamp_min(LIKELIHOOD_FLOOR)


def estimate_bits(*likelihoods) -> float:
    """``-sum(log2 p)`` over every given likelihood tensor."""
    total = 0.0
    for lk in likelihoods:
        p = lk.data if isinstance(lk, Tensor) else np.asarray(lk)
        if p.size and (np.any(p <= 0) or np.any(p > 1 + 1e-6)):
            raise ValueError("likelihoods must lie in (0, 1]")
        total += float(-np.log2(p.astype(np.float64)).sum())
    return total


def rate_bits(*likelihoods: Tensor) -> Tensor:
    """Differentiable ``-sum(log2 p)``."""
    out = None
    for lk in likelihoods:
        term = lk.log().sum() * (-1.0 / np.log(2.0))
        out = term if out is None else out + term
    return out


class FactorizedPrior(Module):
    """Per-channel learned CDF built from monotone affine/tanh stages."""

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.channels = channels
        self.matrices = []
        self.biases = []
        self.factors = []
        for k in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[k + 1]))
            m = Parameter(np.full((channels, dims[k + 1], dims[k]), init))
            b = Parameter(rng.uniform(-0.5, 0.5, size=(channels, dims[k + 1], 1)))
            setattr(self, f"matrix{k}", m)
            setattr(self, f"bias{k}", b)
            self.matrices.append(m)
            self.biases.append(b)
            if k < len(dims) - 2:
                f = Parameter(np.zeros((channels, dims[k + 1], 1)))
                setattr(self, f"factor{k}", f)
                self.factors.append(f)

    def logits_cdf(self, x: Tensor) -> Tensor:
        """``x`` is ``[C, 1, M]``; returns logits of the CDF with the same shape."""
        for k, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = m.softplus() @ x + b
            if k < len(self.factors):
                x = x + self.factors[k].tanh() * x.tanh()
        return x

    def cdf_numpy(self, x: np.ndarray) -> np.ndarray:
        """CDF evaluated off the tape; ``x`` is ``[C, M]``."""
        with no_grad():
            logits = self.logits_cdf(Tensor(x[:, None, :].astype(self.matrices[0].dtype)))
        return special.expit(logits.data[:, 0, :].astype(np.float64))

    def likelihood(self, z_hat: Tensor) -> Tensor:
        return factorized_likelihood(z_hat, self)

    # -- coding tables --------------------------------------------------------
    def tables(self, search: int = 1024) -> list["CodingTable"]:
        """One table per channel over the integer support holding all but TAIL_MASS."""
        grid = np.arange(-search, search + 1, dtype=np.float64)
        edges = np.concatenate([grid - 0.5, grid[-1:] + 0.5])
        cdf = self.cdf_numpy(np.broadcast_to(edges, (self.channels, edges.size)).copy())
        out = []
        for c in range(self.channels):
            cc = np.maximum.accumulate(cdf[c])
            below = np.nonzero(cc[:-1] <= TAIL_MASS / 2)[0]
            lo = int(below[-1]) if below.size else 0
            above = np.nonzero(1.0 - cc[1:] <= TAIL_MASS / 2)[0]
            hi = int(above[0]) if above.size else grid.size - 1
            if hi < lo:
                lo, hi = hi, lo
            pmf = cc[lo + 1 : hi + 2] - cc[lo : hi + 1]
            tail = cc[lo] + (1.0 - cc[hi + 1])
            out.append(CodingTable.from_pmf(pmf, tail, int(grid[lo])))
        return out


def factorized_likelihood(z_hat: Tensor, prior: FactorizedPrior) -> Tensor:
    """``CDF(z + 0.5) - CDF(z - 0.5)`` per channel, floored."""
    n, c, h, w = z_hat.shape
    x = z_hat.transpose(1, 0, 2, 3).reshape(c, 1, n * h * w)
    lower = prior.logits_cdf(x - 0.5)
    upper = prior.logits_cdf(x + 0.5)
    # evaluate in the tail that keeps sigmoid differences well conditioned
    sign = np.where(lower.data + upper.data > 0, -1.0, 1.0).astype(x.dtype)
    p = ((upper * sign).sigmoid() - (lower * sign).sigmoid()).abs()
    p = p.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    return p.clamp_min(LIKELIHOOD_FLOOR)


class CodingTable:
    """Quantized frequency table over ``[offset, offset + n)`` plus one escape bin.

    ``cdf`` has ``n + 2`` entries; the last bin (index ``n``) signals a symbol
    outside the explicit support.
    """

    __slots__ = ("cdf", "offset", "n")

    def __init__(self, cdf: list[int], offset: int):
        self.cdf = cdf
        self.offset = offset
        self.n = len(cdf) - 2

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, tail: float, offset: int) -> "CodingTable":
        probs = np.concatenate([np.maximum(np.asarray(pmf, dtype=np.float64), 0.0), [max(tail, 0.0)]])
        s = probs.sum()
        probs = probs / s if s > 0 else np.full(probs.size, 1.0 / probs.size)
        return cls(quantize_frequencies(probs), offset)

    @property
    def lower(self) -> int:
        return self.offset

    @property
    def upper(self) -> int:
        return self.offset + self.n - 1


def quantize_frequencies(probs: np.ndarray, total: int = FREQ_TOTAL) -> list[int]:
    """Integer frequencies, each >= 1, summing to ``total`` (largest remainder)."""
    k = probs.size
    if k > total:
        raise ValueError(f"{k} symbols cannot fit a {total}-frequency table")
    scaled = probs * (total - k)
    freq = np.floor(scaled).astype(np.int64) + 1
    rem = total - int(freq.sum())
    if rem > 0:
        order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
        freq[order[:rem]] += 1
    cdf = np.concatenate([[0], np.cumsum(freq)])
    return [int(v) for v in cdf]


def scale_index(sigma: np.ndarray) -> np.ndarray:
    """Nearest log-spaced scale level for each sigma."""
    s = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SCALE_MAX)
    return np.floor(np.log(s / SIGMA_MIN) / np.log(SCALE_RATIO) + 0.5).astype(np.int64)


@lru_cache(maxsize=None)
def gaussian_table(index: int) -> CodingTable:
    """Zero-mean Gaussian table for scale level ``index``."""
    sigma = SIGMA_MIN * SCALE_RATIO**index
    t = -special.ndtri(TAIL_MASS / 2)
    half = max(int(np.ceil(t * sigma - 0.5)), 0)
    k = np.arange(-half, half + 1, dtype=np.float64)
    pmf = special.ndtr((k + 0.5) / sigma) - special.ndtr((k - 0.5) / sigma)
    tail = 2.0 * special.ndtr(-(half + 0.5) / sigma)
    return CodingTable.from_pmf(pmf, tail, -half)
