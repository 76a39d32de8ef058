"""Model checkpoint files.

Layout (little-endian)::

    b"RCKP" | u8 version | u32 len + model config text | u32 len + metadata text
    | u32 parameter count | per parameter: u16 len + name, u8 ndim, ndim x u32 dims,
      float32 data | u32 CRC-32 of everything before

Config and metadata are ``key=value`` lines. Parameters appear in declaration order.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig, RoiCodec
from .tensor import default_dtype

MAGIC = b"RCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _kv_text(meta: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in meta.items())


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def checkpoint_bytes(model: RoiCodec, metadata: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    for text in (model.config.to_text(), _kv_text(metadata or {})):
        raw = text.encode()
        parts += [struct.pack("<I", len(raw)), raw]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", p.ndim)]
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, model: RoiCodec, metadata: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def parse_checkpoint(data: bytes, dtype=np.float32) -> tuple[RoiCodec, dict[str, str]]:
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    if body[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {body[4]}")
    pos = 5
    texts = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        texts.append(body[pos : pos + n].decode())
        pos += n
    config = ModelConfig.from_text(texts[0])
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + n].decode()
        pos += n
        ndim = body[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    with default_dtype(dtype):
        model = RoiCodec(config)
    model.load_state_dict(state)
    return model, _parse_kv(texts[1])


def load_checkpoint(path, dtype=np.float32) -> tuple[RoiCodec, dict[str, str]]:
    return parse_checkpoint(Path(path).read_bytes(), dtype)
