import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdcodec.coding import (
    HEADER_BYTES,
    TOTAL,
    BadMagicError,
    CdfTable,
    ChecksumError,
    CodingError,
    Header,
    TruncatedStreamError,
    VersionMismatchError,
    quantize_pmf,
    range_decode,
    range_encode,
    read_bitstream,
    table_from_pmf,
    write_bitstream,
)


def random_table(rng, n=None, escape=True):
    n = n or int(rng.integers(1, 40))
    pmf = rng.dirichlet(np.full(n + int(escape), 0.5))
    return table_from_pmf(pmf, int(rng.integers(-20, 20)), escape)


def ideal_bits(symbols, tables):
    return sum(-math.log2(t.probabilities()[s - t.offset]) for s, t in zip(symbols, tables))


# --- probability tables ----------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=300).filter(lambda v: sum(v) > 0))
def test_quantized_pmf_is_valid(pmf):
    freq = quantize_pmf(np.array(pmf))
    assert freq.sum() == TOTAL and freq.min() >= 1


def test_quantized_pmf_rejects_garbage():
    for bad in ([], [[0.5, 0.5]], [-1.0, 2.0], [np.nan, 1.0]):
        with pytest.raises(ValueError):
            quantize_pmf(np.array(bad, dtype=float))


def test_table_validation():
    with pytest.raises(ValueError):
        CdfTable((0, 5, 5, TOTAL), 0)
    with pytest.raises(ValueError):
        CdfTable((0, 100), 0)
    with pytest.raises(ValueError):
        CdfTable((0, TOTAL), 0, escape=True)


# --- range coder -------------------------------------------------------------

def test_empty_sequence():
    assert range_decode(range_encode([], []), []) == []


def test_uniform_256_costs_one_byte_per_symbol():
    rng = np.random.default_rng(0)
    syms = rng.integers(0, 256, 1000).tolist()
    tables = [CdfTable.uniform(256)] * 1000
    data = range_encode(syms, tables)
    assert abs(len(data) - 1000) <= 4
    assert range_decode(data, tables) == syms


def test_single_symbol_alphabet_is_free():
    table = CdfTable.uniform(1)
    data = range_encode([0] * 500, [table] * 500)
    assert len(data) <= 1
    assert range_decode(data, [table] * 500) == [0] * 500


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200))
def test_round_trip_fuzz(seed, n):
    rng = np.random.default_rng(seed)
    tables = [random_table(rng) for _ in range(n)]
    syms = []
    for t in tables:
        lo, hi = t.support
        if rng.random() < 0.1:
            # far outside the support, through the escape path
            syms.append(int(rng.choice([lo - 1, hi + 1, lo - 40000, hi + 2**40])))
        else:
            syms.append(int(rng.integers(lo, hi + 1)))
    assert range_decode(range_encode(syms, tables), tables) == syms


def test_escape_needs_escape_bin():
    with pytest.raises(CodingError):
        range_encode([5], [CdfTable.uniform(4)])


def test_extreme_skew_round_trip():
    # a bin of weight 1/2**16 next to a huge one
    table = CdfTable((0, 1, TOTAL - 1, TOTAL), 0)
    syms = [1] * 3000 + [0, 2, 0] + [1] * 3000
    assert range_decode(range_encode(syms, [table] * len(syms)), [table] * len(syms)) == syms


def test_length_close_to_ideal():
    rng = np.random.default_rng(1)
    for _ in range(3):
        tables = [random_table(rng, escape=False) for _ in range(10_000)]
        syms = [int(rng.choice(np.arange(t.offset, t.offset + t.num_regular), p=t.probabilities()))
                for t in tables]
        ideal = ideal_bits(syms, tables)
        actual = 8 * len(range_encode(syms, tables))
        assert abs(actual - ideal) / ideal < 0.02


def test_encoding_is_deterministic():
    rng = np.random.default_rng(2)
    tables = [random_table(rng) for _ in range(2000)]
    syms = [t.offset for t in tables]
    assert range_encode(syms, tables) == range_encode(syms, tables)


def test_decode_count_checks():
    with pytest.raises(ValueError):
        range_encode([0, 1], [CdfTable.uniform(2)])
    with pytest.raises(ValueError):
        range_decode(b"", [CdfTable.uniform(2)], n=2)


# --- container ----------------------------------------------------------------

HEADER = Header(config_hash=bytes(range(16)), width=70, height=33, pad_h=31, pad_w=58,
                lmbda=0.0128, rho=0.9, steps=17, gamma=0.25, y_shape=(8, 4, 8), z_shape=(4, 1, 2))


def test_container_round_trip():
    data = write_bitstream(HEADER, b"zz", b"yyyy")
    assert len(data) == HEADER_BYTES + 6
    bs = read_bitstream(data)
    assert bs.header == HEADER
    assert (bs.z_bytes, bs.y_bytes) == (b"zz", b"yyyy")
    assert bs.to_bytes() == data
    assert bs.payload_bits == 48
    assert bs.bpp == pytest.approx(8 * len(data) / (70 * 33))


def test_bad_magic():
    data = bytearray(write_bitstream(HEADER, b"", b"a"))
    data[0] ^= 1
    with pytest.raises(BadMagicError):
        read_bitstream(bytes(data))


def test_version_mismatch():
    data = write_bitstream(Header(**{**HEADER.__dict__, "version": 9}), b"", b"a")
    with pytest.raises(VersionMismatchError):
        read_bitstream(data)


@pytest.mark.parametrize("pos", [10, 40, HEADER_BYTES - 1, HEADER_BYTES + 1])
def test_bit_flip_is_detected(pos):
    data = bytearray(write_bitstream(HEADER, b"zz", b"yyyy"))
    data[pos] ^= 0x10
    with pytest.raises(ChecksumError):
        read_bitstream(bytes(data))


@pytest.mark.parametrize("keep", [0, 2, 30, HEADER_BYTES + 3])
def test_truncation(keep):
    data = write_bitstream(HEADER, b"zz", b"yyyy")
    with pytest.raises(TruncatedStreamError):
        read_bitstream(data[:keep])


def test_hash_length_checked():
    with pytest.raises(ValueError):
        write_bitstream(Header(config_hash=b"x", width=1, height=1), b"", b"")
