"""Generated image/mask corpus with rectangular ROIs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import write_image


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1, c2 = rng.uniform(0.1, 0.9, size=(3, 3, 1, 1))
    bg = c0 + (c1 - c0) * yy[None] * rng.uniform(0.3, 1.0) + (c2 - c0) * xx[None] * rng.uniform(0.3, 1.0)
    for _ in range(3):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.15, 0.4)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        bg = bg + rng.uniform(-0.25, 0.25, size=(3, 1, 1)) * blob[None]
    return bg


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = rng.integers(3)
    f = rng.uniform(0.1, 0.35)
    theta = rng.uniform(0, np.pi)
    if kind == 0:
        pat = np.sin(f * (np.cos(theta) * xx + np.sin(theta) * yy))
    elif kind == 1:
        pat = np.sign(np.sin(f * xx)) * np.sign(np.sin(f * yy))
    else:
        pat = np.sin(f * xx) * np.cos(f * 0.7 * yy)
    a, b = rng.uniform(0.05, 0.95, size=(2, 3, 1, 1))
    return a + (b - a) * (0.5 + 0.5 * pat[None])


def generate_pair(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """One ``[3, size, size]`` image in [0, 1] and its binary ``[1, size, size]`` mask."""
    img = _smooth_background(rng, size)
    for _ in range(int(rng.integers(1, 4))):
        h, w = rng.integers(size // 8, size // 3, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        img[:, top : top + h, left : left + w] = rng.uniform(0, 1, size=(3, 1, 1))
    h, w = rng.integers(size // 4, size // 2 + 1, size=2)
    top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    img[:, top : top + h, left : left + w] = _texture(rng, h, w)
    mask = np.zeros((1, size, size))
    mask[:, top : top + h, left : left + w] = 1.0
    img = img + rng.normal(0, 0.01, size=img.shape)
    # 8-bit values, so file round trips are exact
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return img, mask


def generate_corpus(n: int, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    pairs = [generate_pair(rng, size) for _ in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def write_corpus(directory, n: int, size: int = 64, seed: int = 0) -> tuple[Path, Path]:
    """Write ``images/NNNN.png`` and ``masks/NNNN.png`` under ``directory``."""
    root = Path(directory)
    images, masks = generate_corpus(n, size, seed)
    for i, (img, mask) in enumerate(zip(images, masks)):
        write_image(root / "images" / f"{i:04d}.png", img)
        write_image(root / "masks" / f"{i:04d}.png", mask)
    return root / "images", root / "masks"
