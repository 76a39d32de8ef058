import struct

import numpy as np
import pytest

from helpers import rect_mask
from roicodec.bitstream import (
    HEADER_BYTES,
    Bitstream,
    BitstreamError,
    ModelMismatchError,
    decode_image,
    encode_image,
    latent_likelihoods,
    model_hash,
    read_bitstream,
    write_bitstream,
)
from roicodec.entropy import estimate_bits
from roicodec.evaluation import bpp_measure
from roicodec.model import build_model, decode_latents, encode_latents


@pytest.fixture(scope="module")
def model():
    return build_model("toy", seed=3)


def _image(seed, size=64):
    rng = np.random.default_rng(seed)
    return rng.random((3, size, size)), rect_mask(1, size, 5, 9, size // 3, size // 2)[0]


def test_header_layout(model):
    img, mask = _image(0, 70)
    data, _ = encode_image(img, mask, model)
    assert data[:4] == b"ROIC" and data[4] == 1
    assert struct.unpack("<II", data[5:13]) == (70, 70)
    assert struct.unpack("<Q", data[13:21])[0] == model_hash(model)
    bs = Bitstream.from_bytes(data)
    assert len(bs) == len(data) == HEADER_BYTES + bs.payload_bytes + 4


def test_read_write_identity(model):
    for seed in range(3):
        img, mask = _image(seed)
        lat, _ = encode_latents(img[None], mask[None], model)
        back = read_bitstream(write_bitstream(lat, model).to_bytes(), model)
        np.testing.assert_array_equal(back.y_hat.data, lat.y_hat.data)
        np.testing.assert_array_equal(back.z_hat.data, lat.z_hat.data)
        assert back.geometry == lat.geometry


def test_padded_geometry_in_header(model):
    img, mask = _image(1, 250)
    data, lat = encode_image(img, mask, model)
    bs = Bitstream.from_bytes(data)
    assert (bs.height, bs.width) == (250, 250)
    assert lat.y_hat.shape[2:] == (16, 16)
    rec = decode_image(data, model)
    assert rec.shape == (3, 250, 250)
    assert bpp_measure(data, 250, 250) == 8 * len(data) / (250 * 250)


def test_decode_matches_in_memory(model):
    img, mask = _image(4)
    data, lat = encode_image(img, mask, model)
    direct = decode_latents(lat.y_hat, lat.z_hat, model, lat.geometry).data[0]
    np.testing.assert_array_equal(decode_image(data, model), direct)


def test_checkerboard_round_trip():
    model = build_model("toy", context_mode="checkerboard", seed=2)
    model.context.weight.data[:] = np.random.default_rng(0).normal(size=model.context.weight.shape) * 0.05
    img, mask = _image(5, 128)
    data, lat = encode_image(img, mask, model)
    back = read_bitstream(data, model)
    np.testing.assert_array_equal(back.y_hat.data, lat.y_hat.data)


def test_rate_estimate_fidelity(model):
    for seed in range(3):
        img, mask = _image(10 + seed, 128)
        data, lat = encode_image(img, mask, model)
        est = estimate_bits(*latent_likelihoods(lat, model))
        actual = 8 * Bitstream.from_bytes(data).payload_bytes
        assert abs(est - actual) <= 0.001 * est + 256
        assert bpp_measure(data, 128, 128) >= est / (128 * 128)


def test_corruption_detected(model):
    img, mask = _image(6)
    data = bytearray(encode_image(img, mask, model)[0])
    for pos in (2, 10, len(data) // 2, len(data) - 6):
        bad = bytearray(data)
        bad[pos] ^= 0x40
        with pytest.raises(BitstreamError):
            read_bitstream(bytes(bad), model)


def test_truncation_detected(model):
    img, mask = _image(7)
    data = encode_image(img, mask, model)[0]
    for n in (0, 10, len(data) - 1):
        with pytest.raises(BitstreamError):
            Bitstream.from_bytes(data[:n])


def test_length_overrun_detected():
    bs = Bitstream(64, 64, 1, b"\x00" * 5, b"\x00" * 5)
    raw = bytearray(bs.to_bytes()[:-4])
    raw[21:25] = struct.pack("<I", 10_000)
    import zlib

    raw += struct.pack("<I", zlib.crc32(raw))
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(bytes(raw))


def test_hash_mismatch(model):
    img, mask = _image(8)
    data = encode_image(img, mask, model)[0]
    with pytest.raises(ModelMismatchError):
        read_bitstream(data, build_model("toy", seed=4))
    other = build_model("toy", seed=3)
    other.synthesis_bias.data[0] += 1e-3  # same config, different weights
    with pytest.raises(ModelMismatchError):
        read_bitstream(data, other)


def test_encode_deterministic(model):
    img, mask = _image(9)
    assert encode_image(img, mask, model)[0] == encode_image(img, mask, model)[0]


def test_empty_payload_bpp_counts_header():
    bs = Bitstream(64, 64, 0, b"", b"")
    assert bpp_measure(bs, 64, 64) == 8 * (HEADER_BYTES + 4) / 4096 > 0
