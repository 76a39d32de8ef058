import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roicodec.entropy import CodingTable, quantize_frequencies
from roicodec.rangecoder import RangeCoderError, RangeDecoder, RangeEncoder, decode_value, encode_value, range_decode, range_encode


def random_tables(rng, n, max_bins=300):
    out = []
    for _ in range(n):
        k = int(rng.integers(1, max_bins))
        p = rng.dirichlet(np.full(k, rng.uniform(0.05, 2.0)))
        out.append(quantize_frequencies(p))
    return out


def test_empty_sequence_flush():
    data = range_encode([], [])
    assert len(data) <= 8
    assert range_decode(data, [], 0) == []


def test_round_trip_random_tables():
    rng = np.random.default_rng(0)
    tables = random_tables(rng, 20)
    choice = rng.integers(0, 20, 5000)
    cdfs = [tables[c] for c in choice]
    syms = [int(rng.integers(0, len(c) - 1)) for c in cdfs]
    assert range_decode(range_encode(syms, cdfs), cdfs, len(syms)) == syms


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_round_trip_property(data):
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    tables = random_tables(rng, 4, 40)
    n = data.draw(st.integers(0, 300))
    cdfs = [tables[int(rng.integers(4))] for _ in range(n)]
    syms = []
    for c in cdfs:
        freq = np.diff(c)
        syms.append(int(rng.choice(len(freq), p=freq / freq.sum())))
    assert range_decode(range_encode(syms, cdfs), cdfs, n) == syms


def test_uniform_256_length():
    rng = np.random.default_rng(1)
    uniform = quantize_frequencies(np.full(256, 1 / 256))
    syms = rng.integers(0, 256, 100_000).tolist()
    data = range_encode(syms, [uniform] * len(syms))
    assert 0.999 * 100_000 <= len(data) <= 1.001 * 100_000 + 8


def test_single_symbol_alphabet():
    table = [0, 1 << 16]
    sizes = {len(range_encode([0] * n, [table] * n)) for n in (0, 1, 100, 5000)}
    assert len(sizes) == 1
    data = range_encode([0] * 5000, [table] * 5000)
    assert range_decode(data, [table] * 7, 7) == [0] * 7


def test_symbol_outside_support():
    with pytest.raises(RangeCoderError):
        range_encode([3], [[0, 10, 20, 30]])


def test_truncated_stream():
    rng = np.random.default_rng(2)
    uniform = quantize_frequencies(np.full(256, 1 / 256))
    syms = rng.integers(0, 256, 200).tolist()
    data = range_encode(syms, [uniform] * 200)
    with pytest.raises(RangeCoderError):
        range_decode(data[:50], [uniform] * 200, 200)


def test_bypass_bits_round_trip():
    enc = RangeEncoder()
    enc.encode_bits(0b1011001, 7)
    enc.encode_bits(0, 3)
    dec = RangeDecoder(enc.finish())
    assert dec.decode_bits(7) == 0b1011001
    assert dec.decode_bits(3) == 0


def test_escape_values_round_trip():
    table = CodingTable.from_pmf(np.array([0.2, 0.6, 0.2]), 1e-4, -1)
    values = [-1, 0, 1, 2, -2, 17, -1000, 2**40, 0]
    enc = RangeEncoder()
    for v in values:
        encode_value(enc, v, table)
    dec = RangeDecoder(enc.finish())
    assert [decode_value(dec, table) for v in values] == values


def test_skewed_table_near_entropy():
    rng = np.random.default_rng(3)
    p = np.array([0.9, 0.05, 0.03, 0.02])
    table = quantize_frequencies(p)
    syms = rng.choice(4, size=50_000, p=p).tolist()
    data = range_encode(syms, [table] * len(syms))
    q = np.diff(table) / table[-1]
    ideal = -np.log2(q[syms]).sum()
    assert 8 * len(data) <= ideal * 1.001 + 64
