"""Quality and rate metrics, RD-curve tables and attention-map extraction."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitstream import Bitstream, decode_image, encode_image
from .imageio import write_image
from .model import RoiCodec, decode_latents, encode_latents

PSNR_CAP = 99.0
DEFAULT_ROI_THRESHOLD = 0.5


class EmptyRegionError(ValueError):
    """The selected pixel set is empty."""


def _mse_to_psnr(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def psnr(x, y) -> float:
    """PSNR in dB of two same-shaped arrays on the [0, 1] scale."""
    x, y = _as_float(x), _as_float(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return _mse_to_psnr(float(np.mean((x - y) ** 2)))


def region_mask(mask, threshold: float = DEFAULT_ROI_THRESHOLD, invert: bool = False) -> np.ndarray:
    """Boolean selection ``mask >= threshold`` (or its complement)."""
    sel = _as_float(mask) >= threshold
    return ~sel if invert else sel


def _masked_psnr(x, y, sel: np.ndarray) -> float:
    x, y = _as_float(x), _as_float(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not sel.any():
        raise EmptyRegionError("mask selects no pixels")
    # [1, H, W] or [H, W] masks apply to every channel
    sel = np.broadcast_to(sel.reshape(sel.shape[-2:]), x.shape)
    return _mse_to_psnr(float(np.mean((x[sel] - y[sel]) ** 2)))


def roi_psnr(x, y, mask, threshold: float = DEFAULT_ROI_THRESHOLD) -> float:
    """PSNR over pixels whose mask value is at least ``threshold``, all channels."""
    return _masked_psnr(x, y, region_mask(mask, threshold))


def background_psnr(x, y, mask, threshold: float = DEFAULT_ROI_THRESHOLD) -> float:
    """PSNR over the complement of the ROI selection."""
    return _masked_psnr(x, y, region_mask(mask, threshold, invert=True))


def bpp_measure(bitstream: Bitstream | bytes, height: int, width: int) -> float:
    """Total container bits (headers included) per original pixel."""
    return 8.0 * len(bitstream) / (height * width)


# -- RD table --------------------------------------------------------------------

RD_COLUMNS = ("omega", "image_id", "bpp", "psnr", "roi_psnr", "bg_psnr")


@dataclass
class RdRow:
    omega: float
    image_id: str
    bpp: float
    psnr: float
    roi_psnr: float
    bg_psnr: float

    def cells(self) -> list[str]:
        return [_fmt(self.omega), self.image_id] + [_fmt(v) for v in (self.bpp, self.psnr, self.roi_psnr, self.bg_psnr)]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except EmptyRegionError:
        return math.nan


def evaluate_image(model: RoiCodec, image: np.ndarray, mask: np.ndarray, threshold: float = DEFAULT_ROI_THRESHOLD) -> dict:
    """Encode, decode and score one ``[3, H, W]`` image."""
    data, _ = encode_image(image, mask, model)
    rec = decode_image(data, model)
    h, w = image.shape[1:]
    return {
        "bpp": bpp_measure(data, h, w),
        "psnr": psnr(image, rec),
        "roi_psnr": _or_nan(roi_psnr, image, rec, mask, threshold),
        "bg_psnr": _or_nan(background_psnr, image, rec, mask, threshold),
    }


def rd_rows(models, corpus, threshold: float = DEFAULT_ROI_THRESHOLD) -> list[RdRow]:
    """Per-image rows followed by one mean row per model.

    ``models`` is a sequence of ``(omega, model)``; ``corpus`` of
    ``(image_id, image, mask)``. Output order follows the inputs.
    Undefined metrics (for example ROI PSNR of a mask without ROI) are NaN
    and are skipped by the means.
    """
    models, corpus = list(models), list(corpus)
    if not models:
        raise ValueError("no models to evaluate")
    if not corpus:
        raise ValueError("corpus is empty")
    rows, means = [], []
    for omega, model in models:
        per = []
        for image_id, image, mask in corpus:
            m = evaluate_image(model, image, mask, threshold)
            per.append(RdRow(float(omega), str(image_id), m["bpp"], m["psnr"], m["roi_psnr"], m["bg_psnr"]))
        rows += per
        cols = [np.array([getattr(r, k) for r in per]) for k in RD_COLUMNS[2:]]
        avg = [float(np.nanmean(c)) if np.any(~np.isnan(c)) else math.nan for c in cols]
        means.append(RdRow(float(omega), "mean", *avg))
    return rows + means


def rd_curve_csv(models, corpus, out_path, threshold: float = DEFAULT_ROI_THRESHOLD) -> list[RdRow]:
    """Write :func:`rd_rows` to ``out_path`` as CSV and return the rows."""
    rows = rd_rows(models, corpus, threshold)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RD_COLUMNS)
        for r in rows:
            w.writerow(r.cells())
    return rows


# -- attention maps --------------------------------------------------------------


@dataclass
class AttentionMap:
    site: str
    query_index: int
    query: tuple[int, int]
    # query position in the site's (unshifted) feature map
    feature_pos: tuple[int, int]
    window: int
    shift: int
    heads: np.ndarray  # [num_heads, w, w]

    @property
    def mean(self) -> np.ndarray:
        return self.heads.mean(axis=0)


def query_grid(height: int, width: int, rows: int = 3, cols: int = 3) -> list[tuple[int, int]]:
    """Cell centres of a ``rows x cols`` grid over the image."""
    ys = [int((i + 0.5) * height / rows) for i in range(rows)]
    xs = [int((j + 0.5) * width / cols) for j in range(cols)]
    return [(y, x) for y in ys for x in xs]


def _row_for_query(rec: dict, pos: tuple[int, int]) -> np.ndarray:
    w, s, h, wd = rec["window"], rec["shift"], rec["h"], rec["w"]
    # the block rolls by -s before partitioning, so pixel p sits at (p - s) mod size
    i, j = (pos[0] - s) % h, (pos[1] - s) % wd
    nw = wd // w
    win = (i // w) * nw + (j // w)  # image 0 of the batch
    tok = (i % w) * w + (j % w)
    return rec["weights"][win, :, tok, :].reshape(-1, w, w)


def attention_dump(model: RoiCodec, image, mask, sites=None, queries=None) -> list[AttentionMap]:
    """Attention rows of each query's token at each requested Swin block.

    ``image`` is ``[3, H, W]``, ``mask`` ``[1, H, W]`` (zeros if None).
    ``sites`` are names from ``model.attention_sites()``; all encoder and
    decoder blocks by default. ``queries`` are ``(y, x)`` pixel coordinates,
    a 3x3 grid by default.
    """
    image = np.asarray(image)
    _, height, width = image.shape
    mask = np.zeros((1, height, width)) if mask is None else np.asarray(mask)
    available = model.attention_sites()
    if sites is None:
        sites = [k for k in available if k.startswith(("encoder.", "decoder."))]
    for s in sites:
        if s not in available:
            raise KeyError(f"unknown attention site {s!r}; available: {', '.join(available)}")
    queries = query_grid(height, width) if queries is None else [tuple(int(v) for v in q) for q in queries]
    for y, x in queries:
        if not (0 <= y < height and 0 <= x < width):
            raise ValueError(f"query ({y}, {x}) outside {height}x{width} image")

    blocks = [available[s][0] for s in sites]
    for b in blocks:
        b.record_attention, b.last_attention = True, None
    try:
        latents, _ = encode_latents(image[None], mask[None], model)
        decode_latents(latents.y_hat, latents.z_hat, model, latents.geometry)
        records = {s: available[s][0].last_attention for s in sites}
    finally:
        for b in blocks:
            b.record_attention, b.last_attention = False, None

    maps = []
    for s in sites:
        rec, factor = records[s], available[s][1]
        for qi, q in enumerate(queries):
            pos = (q[0] // factor, q[1] // factor)
            heads = _row_for_query(rec, pos)
            maps.append(AttentionMap(s, qi, q, pos, rec["window"], rec["shift"], heads.astype(np.float64)))
    return maps


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


def write_attention(maps: list[AttentionMap], out_dir) -> Path:
    """PNG per (site, query, head) plus ``attention.csv`` with raw values.

    PNG names are ``{site}_q{index}_h{head}.png`` and ``..._mean.png`` for the
    head average; each map is min-max scaled to 8 bits independently.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "attention.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("site", "query_index", "query_y", "query_x", "feature_y", "feature_x", "window", "shift", "head", "row", "col", "weight"))
        for m in maps:
            grids = [(str(h), g) for h, g in enumerate(m.heads)] + [("mean", m.mean)]
            for head, grid in grids:
                write_image(out / f"{m.site}_q{m.query_index}_h{head}.png", _normalize(grid))
                for r in range(grid.shape[0]):
                    for c in range(grid.shape[1]):
                        w.writerow((m.site, m.query_index, *m.query, *m.feature_pos, m.window, m.shift, head, r, c, repr(float(grid[r, c]))))
    return csv_path
