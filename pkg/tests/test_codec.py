import lzma

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import kraft_sum, optimal_code_cost
from scenes import random_parts
from gs4c.codec import (
    BadMagicError,
    ChecksumError,
    DecodeError,
    EncodingError,
    HuffmanStream,
    TruncatedError,
    UnknownVersionError,
    canonical_codes,
    code_lengths,
    fixed_width_bits,
    huffman_decode,
    huffman_encode,
    lzma_unwrap,
    lzma_wrap,
    measure,
    pack,
    read_container,
    unpack,
    write_container,
)

HEADER = 12
SECTION_HEADER = 13


def test_three_symbol_lengths():
    assert code_lengths([2, 1, 1]).tolist() == [1, 2, 2]
    assert canonical_codes([1, 2, 2]).tolist() == [0b0, 0b10, 0b11]


def test_single_used_symbol_costs_no_bits():
    stream = huffman_encode([3, 3, 3], 5)
    assert stream.n_bits == 0 and stream.lone_symbol == 3
    assert huffman_decode(stream).tolist() == [3, 3, 3]


@settings(max_examples=200, deadline=None)
@given(freqs=st.lists(st.integers(0, 50), min_size=1, max_size=6))
def test_lengths_satisfy_kraft_and_are_optimal(freqs):
    lengths = code_lengths(freqs)
    assert kraft_sum(lengths) <= 1.0
    if sum(f > 0 for f in freqs) >= 2:
        assert [l > 0 for l in lengths] == [f > 0 for f in freqs]
    assert int(np.dot(lengths, freqs)) == optimal_code_cost(freqs)


def test_length_limit_is_respected():
    # Fibonacci weights force a maximally deep tree
    fib = [1, 1]
    while len(fib) < 40:
        fib.append(fib[-1] + fib[-2])
    lengths = code_lengths(fib, max_length=16)
    assert lengths.max() <= 16 and kraft_sum(lengths) <= 1.0


@settings(max_examples=300, deadline=None)
@given(k=st.integers(1, 300), data=st.data())
def test_huffman_roundtrip(k, data):
    symbols = data.draw(st.lists(st.integers(0, k - 1), max_size=400))
    stream = huffman_encode(symbols, k)
    again, end = HuffmanStream.from_bytes(stream.to_bytes())
    assert end == len(stream.to_bytes())
    assert huffman_decode(again).tolist() == symbols
    # never worse than fixed width once the table is paid for
    assert stream.n_bits <= fixed_width_bits(len(symbols), k) + stream.table_bits


@pytest.mark.parametrize("p", [0.2, 0.5, 0.8])
def test_huffman_beats_fixed_width_on_skewed_streams(p):
    rng = np.random.default_rng(int(p * 10))
    k = 512
    symbols = np.minimum(rng.geometric(p, 5000) - 1, k - 1)
    stream = huffman_encode(symbols, k)
    assert stream.n_bits + stream.table_bits < fixed_width_bits(len(symbols), k)


def test_out_of_range_symbol_is_encoding_error():
    with pytest.raises(EncodingError):
        huffman_encode([0, 4], 4)


def test_garbled_bitstream_is_decode_error():
    stream = huffman_encode([0, 1, 2, 0, 0], 3)
    with pytest.raises(DecodeError):
        huffman_decode(HuffmanStream(stream.lengths, stream.data, stream.n_symbols + 5, stream.n_bits))


@settings(max_examples=100, deadline=None)
@given(data=st.binary(max_size=2000))
def test_lzma_roundtrip(data):
    wrapped = lzma_wrap(data)
    assert lzma.decompress(wrapped, format=lzma.FORMAT_ALONE) == data
    assert lzma_unwrap(wrapped) == data


def test_corrupt_lzma_is_decode_error():
    with pytest.raises(DecodeError):
        lzma_unwrap(b"\x00" * 20)


# --------------------------------------------------------------------------
# container
# --------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pack_unpack_roundtrip(seed):
    rng = np.random.default_rng(seed)
    parts = random_parts(rng, mlp=rng.bytes(int(rng.integers(0, 64))))
    blob = pack(parts)
    assert unpack(blob) == parts
    assert pack(unpack(blob)) == blob
    assert measure(blob).total == len(blob)


def test_file_roundtrip(tmp_path, rng):
    parts = random_parts(rng, 25)
    write_container(pack(parts), tmp_path / "m.gs4c")
    assert read_container(tmp_path / "m.gs4c") == parts


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError, match="cannot read"):
        read_container(tmp_path / "nope.gs4c")


def test_means_bytes_scale_with_count(rng):
    parts = random_parts(rng, 30)
    doubled = random_parts(np.random.default_rng(0), 60)
    assert measure(pack(doubled)).means == 2 * measure(pack(parts)).means == 2 * 16 * 30


def test_flipped_byte_names_its_section(rng):
    blob = bytearray(pack(random_parts(rng, 10)))
    blob[HEADER + SECTION_HEADER + 3] ^= 0x01
    with pytest.raises(ChecksumError) as err:
        unpack(bytes(blob))
    assert err.value.section == "means"


def test_bad_magic(rng):
    blob = pack(random_parts(rng, 3))
    with pytest.raises(BadMagicError):
        unpack(b"XXXX" + blob[4:])


def test_unknown_version(rng):
    blob = bytearray(pack(random_parts(rng, 3)))
    blob[4] = 99
    with pytest.raises(UnknownVersionError, match="99"):
        unpack(bytes(blob))


def test_every_truncation_is_rejected(rng):
    blob = pack(random_parts(rng, 4))
    for cut in range(4, len(blob)):
        with pytest.raises(TruncatedError):
            unpack(blob[:cut])


def test_index_count_mismatch_is_encoding_error(rng):
    parts = random_parts(rng, 5)
    key = next(iter(parts.indices))
    parts.indices[key] = parts.indices[key][:3]
    with pytest.raises(EncodingError, match="3 indices"):
        pack(parts)
