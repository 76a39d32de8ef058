"""Spatially weighted rate-distortion training."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .entropy import estimate_bits, rate_bits
from .imageio import ImageReadError, list_images, read_image, read_mask
from .model import PRESETS, RoiCodec, build_model, lambda_map
from .nn import Parameter
from .tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid training configuration; message names the key and line."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.001
    omega: float = 0.0
    lr: float = 1e-4
    batch_size: int = 2
    steps: int = 2000
    crop: int = 64
    seed: int = 0
    precision: str = "float32"
    preset: str = "toy"
    context_mode: str = "none"
    grad_clip: float = 1.0
    image_dir: str = ""
    mask_dir: str = ""
    checkpoint: str = "model.rckp"
    metrics_csv: str = "metrics.csv"
    log_every: int = 50

    def validate(self) -> None:
        problems = []
        if not self.alpha > 0:
            problems.append(("alpha", "must be > 0"))
        if not (math.isfinite(self.omega) and self.omega >= 0):
            problems.append(("omega", "must be finite and >= 0"))
        if not self.lr > 0:
            problems.append(("lr", "must be > 0"))
        if self.batch_size < 1:
            problems.append(("batch_size", "must be >= 1"))
        if self.steps < 0:
            problems.append(("steps", "must be >= 0"))
        if self.crop <= 0 or self.crop % 64:
            problems.append(("crop", "must be a positive multiple of 64"))
        if self.precision not in ("float32", "float64"):
            problems.append(("precision", "must be float32 or float64"))
        if self.preset not in PRESETS:
            problems.append(("preset", f"must be one of {sorted(PRESETS)}"))
        if self.context_mode not in ("none", "checkerboard"):
            problems.append(("context_mode", "must be none or checkerboard"))
        if self.grad_clip < 0:
            problems.append(("grad_clip", "must be >= 0 (0 disables clipping)"))
        if problems:
            key, msg = problems[0]
            raise ConfigError(f"{key}: {msg}")


def parse_train_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment. Unknown keys are errors."""
    types = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = types[key](val)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {types[key].__name__}, got {val!r}") from None
        lines[key] = lineno
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        if key in lines:
            raise ConfigError(f"line {lines[key]}: {exc}") from None
        raise
    return cfg


# -- objective --------------------------------------------------------------------


def rd_loss(x: Tensor, x_rec: Tensor, lmap: np.ndarray, bits, n_pixels: int) -> tuple[Tensor, Tensor]:
    """Per-pixel λ-weighted MSE plus bits per pixel.

    ``lmap`` is ``[N, 1, H, W]``; squared errors are averaged over channels
    per pixel. Returns ``(loss, weighted_distortion)``.
    """
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    lm = np.asarray(lmap)
    if lm.shape != (x.shape[0], 1) + tuple(x.shape[2:]):
        raise ValueError(f"λ-map shape {lm.shape} does not match images {x.shape}")
    diff = x_rec - x
    per_pixel = (diff * diff).mean(axis=1, keepdims=True)
    dist = (per_pixel * lm.astype(x_rec.dtype)).sum() * (1.0 / n_pixels)
    rate = bits * (1.0 / n_pixels)
    return dist + rate, dist


# -- optimizer ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Parameter], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update using ``p.grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no gradient")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


# -- data -----------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    masks: np.ndarray
    ids: list[str]


class RoiDataset:
    """Image/mask pairs matched by filename stem, held in memory."""

    def __init__(self, images: list[np.ndarray], masks: list[np.ndarray], ids: list[str]):
        self.images = images
        self.masks = masks
        self.ids = ids

    @classmethod
    def from_dirs(cls, image_dir, mask_dir, crop: int = 0) -> "RoiDataset":
        imgs = list_images(image_dir)
        masks = list_images(mask_dir)
        missing = [s for s in imgs if s not in masks]
        if missing:
            logger.warning("skipping %d images without masks: %s", len(missing), ", ".join(missing))
        out_i, out_m, ids = [], [], []
        for stem, path in imgs.items():
            if stem not in masks:
                continue
            img = read_image(path)
            mask = read_mask(masks[stem])
            if mask.shape[1:] != img.shape[1:]:
                raise ImageReadError(f"mask {masks[stem]} does not match image size {img.shape[1:]}")
            if crop and min(img.shape[1:]) < crop:
                logger.warning("skipping %s: smaller than crop %d", path, crop)
                continue
            out_i.append(img)
            out_m.append(mask)
            ids.append(stem)
        return cls(out_i, out_m, ids)

    def __len__(self) -> int:
        return len(self.images)

    def batches(self, crop: int, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
        """Seeded shuffle and random crops; the last partial batch is dropped."""
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(self.images))
        for b in range(len(order) // batch_size):
            idx = order[b * batch_size : (b + 1) * batch_size]
            imgs, masks = [], []
            for i in idx:
                img, mask = self.images[i], self.masks[i]
                h, w = img.shape[1:]
                top = int(rng.integers(0, h - crop + 1))
                left = int(rng.integers(0, w - crop + 1))
                imgs.append(img[:, top : top + crop, left : left + crop])
                masks.append(mask[:, top : top + crop, left : left + crop])
            yield Batch(np.stack(imgs), np.stack(masks), [self.ids[i] for i in idx])


def load_dataset(image_dir, mask_dir, crop: int, seed: int, batch_size: int = 2, epoch: int = 0) -> Iterator[Batch]:
    """One epoch of batches from paired image/mask directories."""
    return RoiDataset.from_dirs(image_dir, mask_dir, crop).batches(crop, batch_size, seed, epoch)


# -- loop ---------------------------------------------------------------------------------


def train_step(
    batch: Batch,
    model: RoiCodec,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng: np.random.Generator,
    lmap: np.ndarray | None = None,
) -> dict[str, float]:
    """Forward with noise quantization, λ-weighted RD loss, backward, Adam."""
    dtype = model.synthesis_bias.dtype
    x = Tensor(batch.images.astype(dtype))
    m = Tensor(batch.masks.astype(dtype))
    if lmap is None:
        lmap = lambda_map(batch.masks, cfg.alpha, cfg.omega)
    n_pixels = x.shape[0] * x.shape[2] * x.shape[3]
    params = model.parameters()
    model.zero_grad()
    out = model(x, m, rng)
    bits = rate_bits(*out["likelihoods"])
    loss, dist = rd_loss(x, out["x_hat"], lmap, bits, n_pixels)
    if not np.isfinite(loss.data):
        _diverged(model, out, cfg)
    loss.backward()
    bad = [n for n, p in model.named_parameters() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        _diverged(model, out, cfg, bad)
    if cfg.grad_clip > 0:
        clip_grad_norm(params, cfg.grad_clip)
    adam_step(params, opt, cfg.lr)
    return {
        "L": float(loss.data),
        "weighted_D": float(dist.data),
        "bpp_estimate": estimate_bits(*out["likelihoods"]) / n_pixels,
    }


def _diverged(model: RoiCodec, out: dict, cfg: TrainConfig, bad_params: list[str] | None = None):
    arrays = {"x_hat": out["x_hat"].data, "y": out["y"].data, "z": out["z"].data}
    names = list(bad_params or [])
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)) or name in names:
            arrays[f"param:{name}"] = p.data
            if name not in names:
                names.append(name)
    nonfinite = [k for k, v in arrays.items() if not np.all(np.isfinite(v))]
    dump = Path(cfg.checkpoint).with_suffix(".diverged.npz")
    try:
        np.savez(dump, **{k.replace(":", "_").replace(".", "_"): v for k, v in arrays.items()})
    except OSError:
        dump = None
    raise TrainingDivergedError(
        f"non-finite loss or gradients; offending tensors: {', '.join(nonfinite + names) or 'loss only'}; dump: {dump}"
    )


def train(
    cfg: TrainConfig,
    dataset: RoiDataset | None = None,
    model: RoiCodec | None = None,
    lmap_fn=None,
    on_step=None,
) -> tuple[RoiCodec, list[dict]]:
    """Run ``cfg.steps`` optimization steps, cycling through seeded epochs.

    ``lmap_fn(batch) -> λ-map`` overrides the mask-derived weights.
    """
    cfg.validate()
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    if dataset is None:
        dataset = RoiDataset.from_dirs(cfg.image_dir, cfg.mask_dir, cfg.crop)
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} usable pairs, fewer than one batch")
    if model is None:
        with default_dtype(dtype):
            model = build_model(cfg.preset, seed=cfg.seed, context_mode=cfg.context_mode)
    opt = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    step, epoch = 0, 0
    while step < cfg.steps:
        for batch in dataset.batches(cfg.crop, cfg.batch_size, cfg.seed, epoch):
            if step >= cfg.steps:
                break
            lmap = lmap_fn(batch) if lmap_fn is not None else None
            metrics = train_step(batch, model, cfg, opt, rng, lmap)
            metrics["step"] = step
            history.append(metrics)
            if on_step is not None:
                on_step(metrics)
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("step %d L=%.5f D=%.5f bpp=%.4f", step, metrics["L"], metrics["weighted_D"], metrics["bpp_estimate"])
            step += 1
        epoch += 1
    return model, history


def write_metrics_csv(path, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L", "weighted_D", "bpp"])
        for h in history:
            w.writerow([h["step"], repr(h["L"]), repr(h["weighted_D"]), repr(h["bpp_estimate"])])
