"""Layer vocabulary of the codec: GDN, (shifted) window attention, patch
resampling, SFT modulation and the mask fusion path.

Swin-style blocks operate channel-last (``[N, H, W, C]``); convolutional
pieces (GDN, SFT, mask fusion) are channel-first (``[N, C, H, W]``).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .nn import Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import DimensionError, Tensor, avg_pool2d, concat, softmax

BETA_MIN = 1e-6


# -- GDN ----------------------------------------------------------------------


class GDN(Module):
    """Generalized divisive normalization (or its inverse).

    ``beta = beta_raw**2 + BETA_MIN`` and ``gamma = gamma_raw**2`` keep the
    denominator strictly positive under unconstrained optimization.
    """

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        self.beta_raw = Parameter(np.full(channels, np.sqrt(1.0 - BETA_MIN)))
        self.gamma_raw = Parameter(np.sqrt(gamma_init) * np.eye(channels))
        self.inverse = inverse

    def forward(self, x: Tensor) -> Tensor:
        return gdn(x, self)


def gdn(x: Tensor, params: GDN) -> Tensor:
    """``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; inverse multiplies."""
    if x.ndim != 4 or x.shape[1] != params.beta_raw.shape[0]:
        raise DimensionError(f"GDN over {params.beta_raw.shape[0]} channels got input {x.shape}")
    beta = params.beta_raw * params.beta_raw + BETA_MIN
    gamma = params.gamma_raw * params.gamma_raw
    sq = (x * x).transpose(0, 2, 3, 1)  # N H W C
    norm = (sq @ gamma.transpose(1, 0) + beta).transpose(0, 3, 1, 2)
    root = norm.sqrt()
    return x * root if params.inverse else x / root


# -- windows ------------------------------------------------------------------


def window_partition(x: Tensor, w: int) -> Tensor:
    """``[N, H, W, C]`` -> ``[N * H/w * W/w, w*w, C]`` (row-major windows)."""
    n, h, wd, c = x.shape
    if h % w or wd % w:
        raise DimensionError(f"{h}x{wd} is not divisible by window {w}")
    x = x.reshape(n, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // w) * (wd // w), w * w, c)


def window_merge(windows: Tensor, w: int, n: int, h: int, wd: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    x = windows.reshape(n, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, wd, c)


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the spatial axes of a channel-last tensor."""
    if dy == 0 and dx == 0:
        return x
    return x.roll((dy, dx), (1, 2))


@lru_cache(maxsize=None)
def relative_position_index(w: int, table_window: int) -> np.ndarray:
    """``[w*w, w*w]`` indices into a ``(2*table_window-1)**2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (table_window - 1)
    return rel[0] * (2 * table_window - 1) + rel[1]


@lru_cache(maxsize=None)
def shifted_window_mask(h: int, wd: int, w: int, s: int) -> np.ndarray:
    """``[nW, T, T]`` additive mask: 0 within a region, ``-inf`` across regions."""
    labels = np.zeros((h, wd), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            labels[hs, ws] = cnt
            cnt += 1
    lw = labels.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    same = lw[:, :, None] == lw[:, None, :]
    mask = np.where(same, 0.0, -np.inf)
    mask.setflags(write=False)
    return mask


def effective_window(h: int, wd: int, window: int, shifted: bool) -> tuple[int, int]:
    """Window and shift actually used at resolution ``h x wd``.

    A feature map no larger than the window is attended as one window and
    never shifted.
    """
    if min(h, wd) <= window:
        if h != wd:
            raise DimensionError(f"non-square map {h}x{wd} smaller than window {window}")
        return h, 0
    return window, (window // 2 if shifted else 0)


# -- attention ------------------------------------------------------------------


class WindowAttention(Module):
    """Multi-head self-attention inside a window with relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ValueError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, num_heads), 0.02))
        self.num_heads = num_heads
        self.window = window
        self.dim = dim

    def forward(self, tokens: Tensor, attn_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        return window_attention(tokens, self, attn_mask)


def window_attention(
    tokens: Tensor, params: WindowAttention, attn_mask: np.ndarray | Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention per window.

    Returns the projected tokens ``[B, T, C]`` and the attention weights
    ``[B, heads, T, T]``. ``attn_mask`` is ``[nW, T, T]`` with ``B`` a
    multiple of ``nW`` (windows of one image are contiguous).
    """
    b, t, c = tokens.shape
    if c != params.dim:
        raise DimensionError(f"tokens have {c} channels, attention expects {params.dim}")
    w = int(round(np.sqrt(t)))
    if w * w != t:
        raise DimensionError(f"token count {t} is not a square window")
    h = params.num_heads
    d = c // h
    qkv = params.qkv(tokens).reshape(b, t, 3, h, d).transpose(2, 0, 3, 1, 4)
    q = qkv[0] * (d**-0.5)
    k, v = qkv[1], qkv[2]
    logits = q @ k.swapaxes(-1, -2)  # B h T T
    idx = relative_position_index(w, params.window)
    bias = params.rel_bias[idx.reshape(-1)].reshape(t, t, h).transpose(2, 0, 1)
    logits = logits + bias
    if attn_mask is not None:
        m = attn_mask.data if isinstance(attn_mask, Tensor) else np.asarray(attn_mask)
        nw = m.shape[0]
        if m.shape[1:] != (t, t) or b % nw:
            raise DimensionError(f"mask {m.shape} incompatible with {b} windows of {t} tokens")
        logits = logits.reshape(b // nw, nw, h, t, t) + m[None, :, None].astype(logits.dtype)
        logits = logits.reshape(b, h, t, t)
    attn = softmax(logits, axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
    return params.proj(out), attn


class FeedForward(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator):
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class SwinBlock(Module):
    """One pre-norm transformer block over (optionally shifted) windows."""

    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool, ffn_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, rng)
        self.window = window
        self.shifted = shifted
        self.record_attention = False
        self.last_attention: dict | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, h, wd, c = x.shape
        w, s = effective_window(h, wd, self.window, self.shifted)
        y = self.norm1(x)
        if s:
            y = cyclic_shift(y, -s, -s)
        mask = shifted_window_mask(h, wd, w, s) if s else None
        out, attn = window_attention(window_partition(y, w), self.attn, mask)
        if self.record_attention:
            self.last_attention = {"weights": attn.data.copy(), "n": n, "h": h, "w": wd, "window": w, "shift": s}
        y = window_merge(out, w, n, h, wd)
        if s:
            y = cyclic_shift(y, s, s)
        x = x + y
        return x + self.ffn(self.norm2(x))


class SwinBlockPair(Module):
    """W-MHSA block followed by an SW-MHSA block."""

    def __init__(self, dim: int, num_heads: int, window: int, ffn_ratio: float, rng: np.random.Generator):
        self.w_block = SwinBlock(dim, num_heads, window, False, ffn_ratio, rng)
        self.sw_block = SwinBlock(dim, num_heads, window, True, ffn_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        return swin_block_pair(x, self.w_block, self.sw_block)


def swin_block_pair(x: Tensor, p_w: SwinBlock, p_sw: SwinBlock) -> Tensor:
    if p_w.shifted or not p_sw.shifted:
        raise ValueError("block pair needs a regular then a shifted block")
    if p_w.window != p_sw.window:
        raise ValueError("both blocks of a pair must share the window size")
    return p_sw(p_w(x))


# -- patch resampling -----------------------------------------------------------


def space_to_depth(x: Tensor) -> Tensor:
    """``[N, H, W, C]`` -> ``[N, H/2, W/2, 4C]``; channel index is ``(2*dy+dx)*C + c``."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch downsampling needs even dims, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4 * c)


def depth_to_space(x: Tensor) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    n, h, w, c4 = x.shape
    c = c4 // 4
    return x.reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c)


class PatchDownsample(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.reduce = Linear(4 * c_in, c_out, rng, std=1.0 / np.sqrt(4 * c_in))

    def forward(self, x: Tensor) -> Tensor:
        return self.reduce(space_to_depth(x))


class PatchUpsample(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.expand = Linear(c_in, 4 * c_out, rng, std=1.0 / np.sqrt(c_in))

    def forward(self, x: Tensor) -> Tensor:
        return depth_to_space(self.expand(x))


# -- SFT and conditions -----------------------------------------------------------


class SFT(Module):
    """Spatial feature transform ``gamma(cond) * F + beta(cond)``."""

    def __init__(self, c_feat: int, c_cond: int, rng: np.random.Generator, init_scale: float = 0.1):
        self.gamma_head = Conv2d(c_cond, c_feat, 3, rng)
        self.beta_head = Conv2d(c_cond, c_feat, 3, rng)
        self.gamma_head.weight.data *= init_scale
        self.beta_head.weight.data *= init_scale
        self.gamma_head.bias.data[:] = 1.0

    def forward(self, feature: Tensor, condition: Tensor) -> Tensor:
        return sft_apply(feature, condition, self)


def sft_apply(feature: Tensor, condition: Tensor, params: SFT) -> Tensor:
    if feature.shape[2:] != condition.shape[2:] or feature.shape[0] != condition.shape[0]:
        raise DimensionError(f"condition {condition.shape} does not match feature {feature.shape}")
    gamma = params.gamma_head(condition)
    beta = params.beta_head(condition)
    return gamma * feature + beta


class MaskFusion(Module):
    """Convolutions over the 4-channel (image, mask) stack."""

    def __init__(self, c_cond: int, depth: int, rng: np.random.Generator):
        if depth < 1:
            raise ValueError("mask fusion needs at least one convolution")
        chans = [4] + [c_cond] * depth
        self.convs = [Conv2d(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]

    def forward(self, image: Tensor, mask: Tensor) -> Tensor:
        x = concat([image, mask], axis=1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.gelu()
        return x


def validate_mask(mask: Tensor | np.ndarray) -> None:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.size and (not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")


def mask_condition_path(image: Tensor, mask: Tensor, fusion: MaskFusion, factors: list[int]) -> list[Tensor]:
    """Fuse (image, mask) and average-pool once per SFT site.

    ``factors`` are the downsampling factors of the sites, e.g. ``[2, 4, 8, 16, 64]``.
    """
    validate_mask(mask)
    if mask.shape[2:] != image.shape[2:] or mask.shape[1] != 1:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape}")
    fused = fusion(image, mask)
    return [fused if f == 1 else avg_pool2d(fused, f) for f in factors]
