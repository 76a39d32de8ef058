"""Bitstream container and latent (de)serialization.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"ROIC"
    4       1     version (1)
    5       4     original height (u32)
    9       4     original width (u32)
    13      8     model hash (u64)
    21      4     z payload length Lz (u32)
    25      Lz    z payload (range coded)
    25+Lz   4     y payload length Ly (u32)
    29+Lz   Ly    y payload (range coded)
    29+Lz+Ly 4    CRC-32 of all preceding bytes (u32)

No mask is stored: the decoder only needs the two latents.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .entropy import factorized_likelihood, gaussian_likelihood, gaussian_table, scale_index
from .model import Geometry, LatentPair, RoiCodec, checkerboard, decode_latents, encode_latents, hyper_analysis_params
from .rangecoder import RangeDecoder, RangeEncoder, decode_value, encode_value
from .tensor import Tensor, no_grad, round_half_away

MAGIC = b"ROIC"
VERSION = 1
HEADER_BYTES = 4 + 1 + 4 + 4 + 8 + 4 + 4
TRAILER_BYTES = 4


class BitstreamError(ValueError):
    """Malformed, corrupted or mismatched container."""


class ModelMismatchError(BitstreamError):
    """The stream was produced by a different model."""


def model_hash(model: RoiCodec) -> int:
    """64-bit digest of the model configuration and its float32 weights."""
    h = hashlib.sha256(model.config.to_text().encode())
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class Bitstream:
    height: int
    width: int
    model_hash: int
    z_payload: bytes
    y_payload: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        body = (
            MAGIC
            + struct.pack("<BIIQ", self.version, self.height, self.width, self.model_hash)
            + struct.pack("<I", len(self.z_payload))
            + self.z_payload
            + struct.pack("<I", len(self.y_payload))
            + self.y_payload
        )
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES + TRAILER_BYTES:
            raise BitstreamError("stream shorter than the fixed header")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise BitstreamError("checksum mismatch (corrupted stream)")
        if body[:4] != MAGIC:
            raise BitstreamError("bad magic")
        version, h, w, mh = struct.unpack("<BIIQ", body[4:21])
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        pos = 21
        (lz,) = struct.unpack("<I", body[pos : pos + 4])
        pos += 4
        if pos + lz + 4 > len(body):
            raise BitstreamError("z payload length overruns the stream")
        z = body[pos : pos + lz]
        pos += lz
        (ly,) = struct.unpack("<I", body[pos : pos + 4])
        pos += 4
        if pos + ly != len(body):
            raise BitstreamError("y payload length does not match the stream")
        return cls(h, w, mh, z, body[pos : pos + ly], version)

    @property
    def payload_bytes(self) -> int:
        return len(self.z_payload) + len(self.y_payload)

    def __len__(self) -> int:
        return HEADER_BYTES + self.payload_bytes + TRAILER_BYTES


# -- symbol ordering -----------------------------------------------------------------


def _y_groups(model: RoiCodec, h: int, w: int) -> list[np.ndarray]:
    """Boolean [h, w] masks of the y positions coded in each pass."""
    if model.config.context_mode == "checkerboard":
        a = checkerboard(h, w) > 0
        return [a, ~a]
    return [np.ones((h, w), dtype=bool)]


def _encode_z(enc: RangeEncoder, z_sym: np.ndarray, tables) -> None:
    for c, table in enumerate(tables):
        for v in z_sym[c].ravel():
            encode_value(enc, int(v), table)


def _decode_z(dec: RangeDecoder, tables, h: int, w: int) -> np.ndarray:
    out = np.empty((len(tables), h, w), dtype=np.int64)
    for c, table in enumerate(tables):
        flat = out[c].reshape(-1)
        for i in range(flat.size):
            flat[i] = decode_value(dec, table)
    return out


def write_bitstream(latents: LatentPair, model: RoiCodec) -> Bitstream:
    """Range-code (ŷ, ẑ) of a single image."""
    y_hat, z_hat, geom = latents.y_hat, latents.z_hat, latents.geometry
    if y_hat.shape[0] != 1:
        raise ValueError("a bitstream holds exactly one image")
    tables = model.prior.tables()
    z_sym = round_half_away(z_hat.data[0]).astype(np.int64)
    enc = RangeEncoder()
    _encode_z(enc, z_sym, tables)
    z_payload = enc.finish()

    h, w = y_hat.shape[2:]
    enc = RangeEncoder()
    with no_grad():
        for k, group in enumerate(_y_groups(model, h, w)):
            anchor = None
            if k:
                anchor = Tensor(y_hat.data * checkerboard(h, w).astype(y_hat.dtype))
            mu, sigma = hyper_analysis_params(z_hat, model, anchor)
            sym = round_half_away(y_hat.data[0] - mu.data[0]).astype(np.int64)
            idx = scale_index(sigma.data[0])
            for c in range(sym.shape[0]):
                for v, s in zip(sym[c][group], idx[c][group]):
                    encode_value(enc, int(v), gaussian_table(int(s)))
    y_payload = enc.finish()
    return Bitstream(geom.height, geom.width, model_hash(model), z_payload, y_payload)


def read_bitstream(data: bytes | Bitstream, model: RoiCodec) -> LatentPair:
    """Inverse of :func:`write_bitstream`."""
    bs = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    if bs.model_hash != model_hash(model):
        raise ModelMismatchError("bitstream was written by a different model")
    geom = Geometry.for_size(bs.height, bs.width)
    dtype = model.synthesis_bias.dtype
    zh, zw = geom.z_shape
    z_sym = _decode_z(RangeDecoder(bs.z_payload), model.prior.tables(), zh, zw)
    z_hat = Tensor(z_sym[None].astype(dtype))

    h, w = geom.y_shape
    cy = model.config.latent_channels
    y_hat = np.zeros((1, cy, h, w), dtype=dtype)
    dec = RangeDecoder(bs.y_payload)
    with no_grad():
        for k, group in enumerate(_y_groups(model, h, w)):
            anchor = None
            if k:
                anchor = Tensor(y_hat * checkerboard(h, w).astype(dtype))
            mu, sigma = hyper_analysis_params(z_hat, model, anchor)
            idx = scale_index(sigma.data[0])
            for c in range(cy):
                vals = [decode_value(dec, gaussian_table(int(s))) for s in idx[c][group]]
                sym = np.asarray(vals, dtype=dtype)
                y_hat[0, c][group] = sym + mu.data[0, c][group]
    return LatentPair(Tensor(y_hat), z_hat, geom)


def latent_likelihoods(latents: LatentPair, model: RoiCodec) -> tuple[Tensor, Tensor]:
    """Likelihoods of the quantized latents under the coding-time models."""
    y_hat, z_hat = latents.y_hat, latents.z_hat
    with no_grad():
        anchor = None
        if model.config.context_mode == "checkerboard":
            anchor = Tensor(y_hat.data * checkerboard(*y_hat.shape[2:]).astype(y_hat.dtype))
        mu, sigma = hyper_analysis_params(z_hat, model, anchor)
        return gaussian_likelihood(y_hat, mu, sigma), factorized_likelihood(z_hat, model.prior)


def encode_image(image: np.ndarray, mask: np.ndarray, model: RoiCodec) -> tuple[bytes, LatentPair]:
    """``[3, H, W]`` image + ``[1, H, W]`` mask -> container bytes (and latents)."""
    latents, _ = encode_latents(np.asarray(image)[None], np.asarray(mask)[None], model)
    return write_bitstream(latents, model).to_bytes(), latents


def decode_image(data: bytes, model: RoiCodec) -> np.ndarray:
    """Container bytes -> ``[3, H, W]`` reconstruction in [0, 1]."""
    latents = read_bitstream(data, model)
    return decode_latents(latents.y_hat, latents.z_hat, model, latents.geometry).data[0]
