"""Canonical Huffman + LZMA entropy coding and the single-file container."""

from __future__ import annotations

import heapq
import io
import json
import lzma
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .svq import Attribute, CodebookKey, SvqLayout

MAGIC = b"GS4C"
VERSION = 1
MAX_CODE_LENGTH = 32

KIND_MEANS, KIND_CODEBOOKS, KIND_INDICES, KIND_MLP, KIND_METADATA = range(5)
SECTION_NAMES = {KIND_MEANS: "means", KIND_CODEBOOKS: "codebooks", KIND_INDICES: "index_streams",
                 KIND_MLP: "mlp", KIND_METADATA: "metadata"}
_ATTR_CODES = {a: i for i, a in enumerate(Attribute)}
_HEADER = struct.Struct("<4sHIH")
_SECTION = struct.Struct("<BIQ")


class EncodingError(ValueError):
    pass


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class UnknownVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    def __init__(self, section: str):
        super().__init__(f"checksum mismatch in section {section!r}")
        self.section = section


class DecodeError(ContainerError):
    pass


# --------------------------------------------------------------------------
# canonical Huffman
# --------------------------------------------------------------------------

def code_lengths(freqs: np.ndarray, max_length: int = MAX_CODE_LENGTH) -> np.ndarray:
    """Huffman code lengths for ``freqs`` (zero for unused symbols).

    A lone used symbol gets length 0. If the tree is deeper than
    ``max_length``, frequencies are halved (keeping them positive) and the
    tree rebuilt until it fits.
    """
    freqs = np.asarray(freqs, dtype=np.int64)
    lengths = np.zeros(len(freqs), dtype=np.int64)
    used = np.nonzero(freqs)[0]
    if len(used) <= 1:
        return lengths
    if len(used) > 1 << max_length:
        raise EncodingError(f"{len(used)} symbols cannot fit codes of at most {max_length} bits")
    w = freqs[used].copy()
    while True:
        depth = _tree_depths(w)
        if depth.max() <= max_length:
            lengths[used] = depth
            return lengths
        w = w // 2 + 1


def _tree_depths(weights: np.ndarray) -> np.ndarray:
    # heap entries: (weight, tie, node); leaves are 0..n-1, internal nodes follow
    n = len(weights)
    heap = [(int(w), i, i) for i, w in enumerate(weights)]
    heapq.heapify(heap)
    parent = [-1] * (2 * n - 1)
    nxt = n
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        parent[a] = parent[b] = nxt
        heapq.heappush(heap, (w1 + w2, nxt, nxt))
        nxt += 1
    depth = [0] * (2 * n - 1)
    for node in range(2 * n - 3, -1, -1):
        depth[node] = depth[parent[node]] + 1
    return np.asarray(depth[:n], dtype=np.int64)


def canonical_codes(lengths: np.ndarray) -> np.ndarray:
    """Canonical code values: symbols ordered by (length, symbol) get consecutive codes."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(len(lengths), dtype=np.uint64)
    code = 0
    prev = 0
    for sym in sorted(np.nonzero(lengths)[0].tolist(), key=lambda s: (lengths[s], s)):
        code <<= int(lengths[sym]) - prev
        prev = int(lengths[sym])
        codes[sym] = code
        code += 1
    return codes


@dataclass(frozen=True)
class HuffmanStream:
    lengths: np.ndarray       # code length per alphabet symbol
    data: bytes               # MSB-first bitstream
    n_symbols: int
    n_bits: int
    lone_symbol: int = -1     # the only symbol of a 0-bit stream

    @property
    def alphabet_size(self) -> int:
        return len(self.lengths)

    @property
    def table_bits(self) -> int:
        return 8 * self.alphabet_size

    def to_bytes(self) -> bytes:
        head = struct.pack("<IIQi", self.alphabet_size, self.n_symbols, self.n_bits, self.lone_symbol)
        return head + np.asarray(self.lengths, dtype=np.uint8).tobytes() + self.data

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["HuffmanStream", int]:
        try:
            k, n, nbits, lone = struct.unpack_from("<IIQi", buf, offset)
        except struct.error as exc:
            raise TruncatedError("index stream header cut short") from exc
        offset += 20
        nbytes = (nbits + 7) // 8
        if offset + k + nbytes > len(buf):
            raise TruncatedError("index stream cut short")
        lengths = np.frombuffer(buf, dtype=np.uint8, count=k, offset=offset).astype(np.int64)
        offset += k
        data = bytes(buf[offset:offset + nbytes])
        return cls(lengths, data, n, nbits, lone), offset + nbytes


def huffman_encode(symbols, alphabet_size: int) -> HuffmanStream:
    if alphabet_size < 1:
        raise EncodingError("alphabet size must be >= 1")
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if len(sym) and (sym.min() < 0 or sym.max() >= alphabet_size):
        raise EncodingError(f"symbol out of range [0, {alphabet_size})")
    freqs = np.bincount(sym, minlength=alphabet_size)
    lengths = code_lengths(freqs)
    codes = canonical_codes(lengths)
    sym_len = lengths[sym]
    total = int(sym_len.sum())
    if total == 0:
        return HuffmanStream(lengths, b"", len(sym), 0, int(sym[0]) if len(sym) else -1)
    # expand every code into its bits, most significant first
    rep_code = np.repeat(codes[sym], sym_len)
    rep_len = np.repeat(sym_len, sym_len)
    starts = np.cumsum(sym_len) - sym_len
    pos = np.arange(total) - np.repeat(starts, sym_len)
    shift = (rep_len - 1 - pos).astype(np.uint64)
    bits = ((rep_code >> shift) & np.uint64(1)).astype(np.uint8)
    return HuffmanStream(lengths, np.packbits(bits).tobytes(), len(sym), total)


def huffman_decode(stream: HuffmanStream) -> np.ndarray:
    lengths = np.asarray(stream.lengths, dtype=np.int64)
    if stream.n_symbols == 0:
        return np.zeros(0, dtype=np.int64)
    used = np.nonzero(lengths)[0]
    if len(used) == 0:
        if stream.n_bits or not 0 <= stream.lone_symbol < len(lengths):
            raise DecodeError("0-bit stream without a valid lone symbol")
        return np.full(stream.n_symbols, stream.lone_symbol, dtype=np.int64)
    order = sorted(used.tolist(), key=lambda s: (lengths[s], s))
    max_len = int(lengths.max())
    count = np.bincount(lengths[used], minlength=max_len + 1).tolist()
    first_code = [0] * (max_len + 1)
    first_index = [0] * (max_len + 1)
    code = idx = 0
    for length in range(1, max_len + 1):
        first_code[length] = code
        first_index[length] = idx
        idx += count[length]
        code = (code + count[length]) << 1
    bits = np.unpackbits(np.frombuffer(stream.data, dtype=np.uint8))[:stream.n_bits].tolist()
    if len(bits) < stream.n_bits:
        raise DecodeError("bitstream shorter than declared")
    out = np.empty(stream.n_symbols, dtype=np.int64)
    pos = 0
    for i in range(stream.n_symbols):
        code = length = 0
        while True:
            if pos >= len(bits) or length >= max_len:
                raise DecodeError("invalid or truncated code in bitstream")
            code = (code << 1) | bits[pos]
            pos += 1
            length += 1
            offset = code - first_code[length]
            if 0 <= offset < count[length]:
                out[i] = order[first_index[length] + offset]
                break
    if pos != stream.n_bits:
        raise DecodeError("trailing bits after last symbol")
    return out


def fixed_width_bits(n_symbols: int, alphabet_size: int) -> int:
    return n_symbols * (math.ceil(math.log2(alphabet_size)) if alphabet_size > 1 else 0)


# --------------------------------------------------------------------------
# LZMA
# --------------------------------------------------------------------------

def lzma_wrap(data: bytes, preset: int = 6) -> bytes:
    return lzma.compress(bytes(data), format=lzma.FORMAT_ALONE, preset=preset)


def lzma_unwrap(data: bytes) -> bytes:
    try:
        return lzma.decompress(bytes(data), format=lzma.FORMAT_ALONE)
    except lzma.LZMAError as exc:
        raise DecodeError(f"corrupt LZMA stream: {exc}") from exc


# --------------------------------------------------------------------------
# container
# --------------------------------------------------------------------------

@dataclass
class ModelParts:
    """Everything a container holds, in decoded form."""

    means: np.ndarray                                         # (N, 4) x, y, z, t
    layouts: list[SvqLayout]
    codebooks: dict[CodebookKey, np.ndarray]                  # (K, d) entries
    indices: dict[CodebookKey, np.ndarray]                    # (N,) assignments
    mlp: bytes = b""
    metadata: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParts):
            return NotImplemented
        return (np.array_equal(self.means, other.means)
                and [l.to_json() for l in self.layouts] == [l.to_json() for l in other.layouts]
                and self.codebooks.keys() == other.codebooks.keys()
                and all(np.array_equal(self.codebooks[k], other.codebooks[k]) for k in self.codebooks)
                and self.indices.keys() == other.indices.keys()
                and all(np.array_equal(self.indices[k], other.indices[k]) for k in self.indices)
                and self.mlp == other.mlp and self.metadata == other.metadata)


def _key_order(keys) -> list[CodebookKey]:
    return sorted(keys, key=lambda k: (_ATTR_CODES[k[0]], k[1]))


def _encode_codebooks(parts: ModelParts) -> bytes:
    out = io.BytesIO()
    keys = _key_order(parts.codebooks)
    out.write(struct.pack("<H", len(keys)))
    for attr, j in keys:
        entries = np.asarray(parts.codebooks[(attr, j)], dtype="<f4")
        out.write(struct.pack("<BBIH", _ATTR_CODES[attr], j, entries.shape[0], entries.shape[1]))
        out.write(entries.tobytes())
    return out.getvalue()


def _decode_codebooks(raw: bytes) -> dict[CodebookKey, np.ndarray]:
    attrs = list(Attribute)
    books = {}
    (n,) = struct.unpack_from("<H", raw, 0)
    off = 2
    for _ in range(n):
        code, j, k, d = struct.unpack_from("<BBIH", raw, off)
        off += 8
        entries = np.frombuffer(raw, dtype="<f4", count=k * d, offset=off).reshape(k, d)
        off += 4 * k * d
        books[(attrs[code], j)] = entries.astype(np.float64)
    return books


def _encode_indices(parts: ModelParts) -> bytes:
    out = io.BytesIO()
    keys = _key_order(parts.indices)
    out.write(struct.pack("<H", len(keys)))
    for attr, j in keys:
        alphabet = parts.codebooks[(attr, j)].shape[0]
        stream = huffman_encode(parts.indices[(attr, j)], alphabet)
        out.write(struct.pack("<BB", _ATTR_CODES[attr], j))
        out.write(stream.to_bytes())
    return out.getvalue()


def _decode_indices(raw: bytes) -> dict[CodebookKey, np.ndarray]:
    attrs = list(Attribute)
    out = {}
    (n,) = struct.unpack_from("<H", raw, 0)
    off = 2
    for _ in range(n):
        code, j = struct.unpack_from("<BB", raw, off)
        stream, off = HuffmanStream.from_bytes(raw, off + 2)
        out[(attrs[code], j)] = huffman_decode(stream)
    return out


def _section(kind: int, payload: bytes) -> bytes:
    return _SECTION.pack(kind, zlib.crc32(payload), len(payload)) + payload


def pack(parts: ModelParts) -> bytes:
    """Serialize ``parts``; the result is deterministic for identical inputs."""
    n = parts.count
    for key, idx in parts.indices.items():
        if len(idx) != n:
            raise EncodingError(f"{key[0].value}[{key[1]}] has {len(idx)} indices for {n} Gaussians")
        if key not in parts.codebooks:
            raise EncodingError(f"no codebook for {key[0].value}[{key[1]}]")
    meta = dict(parts.metadata)
    meta["layouts"] = [lay.to_json() for lay in parts.layouts]
    sections = [
        (KIND_MEANS, np.asarray(parts.means, dtype="<f4").reshape(n, 4).tobytes()),
        (KIND_CODEBOOKS, lzma_wrap(_encode_codebooks(parts)) if parts.codebooks else b""),
        (KIND_INDICES, lzma_wrap(_encode_indices(parts)) if parts.indices else b""),
        (KIND_MLP, bytes(parts.mlp)),
        (KIND_METADATA, json.dumps(meta, sort_keys=True).encode()),
    ]
    head = _HEADER.pack(MAGIC, VERSION, n, len(sections))
    return head + b"".join(_section(kind, payload) for kind, payload in sections)


def read_sections(blob: bytes) -> tuple[int, list[tuple[int, bytes]]]:
    blob = bytes(blob)
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a GS4C container (bad magic)")
    if len(blob) < _HEADER.size:
        raise TruncatedError("header cut short")
    _, version, count, n_sections = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise UnknownVersionError(f"unknown version {version} (this reader handles {VERSION})")
    off = _HEADER.size
    sections = []
    for _ in range(n_sections):
        if off + _SECTION.size > len(blob):
            raise TruncatedError("section header cut short")
        kind, crc, length = _SECTION.unpack_from(blob, off)
        off += _SECTION.size
        if off + length > len(blob):
            raise TruncatedError(f"section {SECTION_NAMES.get(kind, kind)!r} cut short")
        payload = blob[off:off + length]
        off += length
        if zlib.crc32(payload) != crc:
            raise ChecksumError(SECTION_NAMES.get(kind, str(kind)))
        sections.append((kind, payload))
    if off != len(blob):
        raise ContainerError(f"{len(blob) - off} trailing bytes after last section")
    return count, sections


def unpack(blob: bytes) -> ModelParts:
    count, sections = read_sections(blob)
    by_kind = dict(sections)
    missing = [SECTION_NAMES[k] for k in SECTION_NAMES if k not in by_kind]
    if missing:
        raise ContainerError(f"missing sections: {', '.join(missing)}")
    means_raw = by_kind[KIND_MEANS]
    if len(means_raw) != 16 * count:
        raise ContainerError(f"means section holds {len(means_raw)} bytes for {count} Gaussians")
    means = np.frombuffer(means_raw, dtype="<f4").reshape(count, 4).astype(np.float64)
    books = _decode_codebooks(lzma_unwrap(by_kind[KIND_CODEBOOKS])) if by_kind[KIND_CODEBOOKS] else {}
    indices = _decode_indices(lzma_unwrap(by_kind[KIND_INDICES])) if by_kind[KIND_INDICES] else {}
    meta = json.loads(by_kind[KIND_METADATA])
    layouts = [SvqLayout.from_json(d) for d in meta.pop("layouts", [])]
    for key, idx in indices.items():
        if len(idx) != count:
            raise ContainerError(f"{key[0].value}[{key[1]}] stream holds {len(idx)} indices for {count}")
    return ModelParts(means, layouts, books, indices, by_kind[KIND_MLP], meta)


@dataclass(frozen=True)
class SizeBreakdown:
    header: int
    means: int
    codebooks: int
    index_streams: int
    mlp: int

    @property
    def total(self) -> int:
        return self.header + self.means + self.codebooks + self.index_streams + self.mlp

    @property
    def megabytes(self) -> float:
        return self.total / 2 ** 20

    def to_json(self) -> dict:
        return {"header": self.header, "means": self.means, "codebooks": self.codebooks,
                "index_streams": self.index_streams, "mlp": self.mlp, "total": self.total,
                "mb": self.megabytes}


def measure(blob: bytes) -> SizeBreakdown:
    """Per-section byte counts; section headers and metadata count as header."""
    _, sections = read_sections(blob)
    sizes = {k: 0 for k in SECTION_NAMES}
    header = _HEADER.size
    for kind, payload in sections:
        header += _SECTION.size
        if kind == KIND_METADATA:
            header += len(payload)
        else:
            sizes[kind] += len(payload)
    return SizeBreakdown(header, sizes[KIND_MEANS], sizes[KIND_CODEBOOKS], sizes[KIND_INDICES], sizes[KIND_MLP])


def write_container(blob: bytes, path: str | Path) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write container {path}: {exc.strerror or exc}") from exc


def read_container(path: str | Path) -> ModelParts:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read container {path}: {exc.strerror or exc}") from exc
    return unpack(blob)
