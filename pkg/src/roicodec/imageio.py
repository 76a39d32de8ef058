"""Image and mask files (PNG, PPM/PGM) <-> float arrays in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class ImageReadError(OSError):
    pass


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageReadError(f"cannot decode image {path}: {exc}") from exc
    return img


def read_image(path) -> np.ndarray:
    """``[3, H, W]`` float64 in [0, 1]; grayscale is replicated to RGB."""
    img = _open(path)
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path) -> np.ndarray:
    """``[1, H, W]`` float64 in [0, 1] (8-bit gray / 255)."""
    img = _open(path)
    arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr[None]


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, x: np.ndarray) -> None:
    """Write ``[3, H, W]`` or ``[1, H, W]`` / ``[H, W]`` data in [0, 1]."""
    x = np.asarray(x)
    if x.ndim == 3 and x.shape[0] == 3:
        img = Image.fromarray(to_uint8(x.transpose(1, 2, 0)), mode="RGB")
    else:
        img = Image.fromarray(to_uint8(x.reshape(x.shape[-2:])), mode="L")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def list_images(directory) -> dict[str, Path]:
    """Map of filename stem -> path for supported image files, sorted by stem."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    found = {p.stem: p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    return dict(sorted(found.items()))
