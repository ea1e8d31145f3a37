"""Canonical Huffman coding of symbol streams and the compressed container.

Tree construction is deterministic: always merge the two lowest-count nodes,
breaking count ties by the smallest symbol value contained in the node. Code
assignment is canonical (shorter codes first, ties by ascending symbol), so a
layer's table is fully described by one code length per alphabet symbol. A
single-symbol alphabet gets a 1-bit code.

Container layout (little-endian):

    magic   4 bytes  b"FQZ1"
    version u16
    then one record per layer until end of file:
        name_len u16, name utf-8
        mode u8 (0 = shift, 1 = recentralized), n_bits u8
        alpha f32, bias i8
        mu_minus (sign i8, exponent i8), mu_plus (sign i8, exponent i8)
        sigma f32
        code lengths, u8 per alphabet symbol (2^n_bits bytes, 0 = absent)
        payload_bits u64, payload bytes (zero-padded to a byte boundary)
        crc32 u32 over every preceding byte of the record
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError
from .focused_quant import MODE_RECENTRALIZED, MODE_SHIFT, LayerQuantization
from .model_store import ModelFile, weight_payload_bytes

MAGIC = b"FQZ1"
VERSION = 1

_MODE_CODES = {MODE_SHIFT: 0, MODE_RECENTRALIZED: 1}
_MODE_NAMES = {code: name for name, code in _MODE_CODES.items()}

REPORT_HEADER = "layer,mode,bits,orig_bytes,comp_bytes,cr,sparsity"


def _huffman_lengths(counts: dict) -> dict:
    """Code length per symbol from positive counts (deterministic merges)."""
    import heapq

    items = sorted(counts.items())
    if not items:
        raise ValueError("no symbols to code")
    if len(items) == 1:
        return {items[0][0]: 1}
    # heap entries: (count, min symbol in subtree, node id)
    heap = [(cnt, sym, i) for i, (sym, cnt) in enumerate(items)]
    heapq.heapify(heap)
    children = {}  # node id -> (left id, right id)
    next_id = len(items)
    while len(heap) > 1:
        c1, m1, n1 = heapq.heappop(heap)
        c2, m2, n2 = heapq.heappop(heap)
        children[next_id] = (n1, n2)
        heapq.heappush(heap, (c1 + c2, min(m1, m2), next_id))
        next_id += 1
    root = heap[0][2]
    lengths = {}
    stack = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        if node in children:
            left, right = children[node]
            stack.append((left, depth + 1))
            stack.append((right, depth + 1))
        else:
            lengths[items[node][0]] = depth
    return lengths


@dataclass
class HuffmanTable:
    """Canonical prefix code over a fixed-size alphabet of small integers."""

    lengths: np.ndarray  # uint8 per alphabet symbol; 0 = symbol absent
    codes: dict = field(init=False, repr=False)
    _decode: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.uint8)
        present = np.nonzero(self.lengths)[0]
        if present.size == 0:
            raise FormatError("code table has no symbols")
        kraft = float(np.sum(2.0 ** -self.lengths[present].astype(np.float64)))
        if kraft > 1.0 + 1e-12:
            raise FormatError(f"Kraft sum {kraft} exceeds 1: not a prefix code")
        order = sorted(present, key=lambda s: (self.lengths[s], s))
        codes = {}
        code = 0
        prev_len = int(self.lengths[order[0]])
        for sym in order:
            length = int(self.lengths[sym])
            code <<= length - prev_len
            if code >> length:
                raise FormatError("code lengths overflow the canonical space")
            codes[int(sym)] = code
            code += 1
            prev_len = length
        self.codes = codes
        # canonical decode tables: per length, first code and symbol slice
        max_len = int(self.lengths[present].max())
        first_code = [0] * (max_len + 1)
        first_index = [0] * (max_len + 1)
        count = [0] * (max_len + 1)
        ordered_syms = [int(s) for s in order]
        idx = 0
        code = 0
        for length in range(1, max_len + 1):
            code <<= 1
            first_code[length] = code
            first_index[length] = idx
            n_here = sum(1 for s in order if self.lengths[s] == length)
            count[length] = n_here
            idx += n_here
            code += n_here
        self._decode = (first_code, first_index, count, ordered_syms, max_len)

    @classmethod
    def from_frequencies(cls, counts, alphabet_size: int) -> "HuffmanTable":
        """Build the table from symbol counts (mapping or dense array)."""
        if isinstance(counts, np.ndarray):
            counts = {int(s): int(c) for s, c in enumerate(counts) if c > 0}
        else:
            counts = {int(s): int(c) for s, c in counts.items() if c > 0}
        if any(not 0 <= s < alphabet_size for s in counts):
            raise ValueError("symbol outside the alphabet")
        lengths = np.zeros(alphabet_size, dtype=np.uint8)
        for sym, length in _huffman_lengths(counts).items():
            if length > 255:
                raise ValueError("code length exceeds u8")
            lengths[sym] = length
        return cls(lengths)

    def encode(self, symbols: np.ndarray):
        """Pack symbols MSB-first; returns (payload bytes, payload bit count)."""
        lengths = self.lengths
        codes = self.codes
        out = bytearray()
        acc = 0
        nbits = 0
        total_bits = 0
        for sym in np.asarray(symbols).ravel():
            sym = int(sym)
            length = int(lengths[sym]) if 0 <= sym < lengths.size else 0
            if length == 0:
                raise ValueError(f"symbol {sym} not in the code table")
            acc = (acc << length) | codes[sym]
            nbits += length
            total_bits += length
            while nbits >= 8:
                nbits -= 8
                out.append((acc >> nbits) & 0xFF)
            acc &= (1 << nbits) - 1
        if nbits:
            out.append((acc << (8 - nbits)) & 0xFF)
        return bytes(out), total_bits

    def decode(self, payload: bytes, payload_bits: int) -> np.ndarray:
        """Decode exactly payload_bits bits back into symbols."""
        if payload_bits > 8 * len(payload):
            raise CorruptionError("payload shorter than its declared bit length")
        first_code, first_index, count, ordered_syms, max_len = self._decode
        symbols = []
        code = 0
        length = 0
        for i in range(payload_bits):
            bit = (payload[i >> 3] >> (7 - (i & 7))) & 1
            code = (code << 1) | bit
            length += 1
            if length > max_len:
                raise CorruptionError("bit pattern matches no codeword")
            if count[length] and code - first_code[length] < count[length]:
                offset = code - first_code[length]
                if offset >= 0:
                    symbols.append(ordered_syms[first_index[length] + offset])
                    code = 0
                    length = 0
        if length != 0:
            raise CorruptionError("payload ends inside a codeword")
        return np.array(symbols, dtype=np.int64)


def build_huffman(frequencies, alphabet_size: int) -> HuffmanTable:
    return HuffmanTable.from_frequencies(frequencies, alphabet_size)


def _encode_pow2(value: float):
    """Split an exact signed power of two (or 0) into (sign, exponent) bytes."""
    if value == 0.0:
        return 0, 0
    mant, exp = np.frexp(abs(value))
    if mant != 0.5:
        raise ValueError(f"{value} is not a signed power of two")
    exponent = int(exp) - 1
    if not -128 <= exponent <= 127:
        raise ValueError("power-of-two exponent outside i8 range")
    return (1 if value > 0 else -1), exponent


def _decode_pow2(sign: int, exponent: int) -> float:
    if sign == 0:
        return 0.0
    if sign not in (-1, 1):
        raise FormatError(f"bad mean sign byte {sign}")
    return float(sign) * float(np.ldexp(1.0, exponent))


_FIXED = struct.Struct("<BBfbbbbbf")  # mode, n_bits, alpha, bias, mu fields, sigma


def encode_layer(lq: LayerQuantization) -> bytes:
    """Serialize one quantized layer to its container record."""
    name = lq.name.encode("utf-8")
    counts = np.bincount(lq.symbols, minlength=lq.alphabet_size)
    table = HuffmanTable.from_frequencies(counts, lq.alphabet_size)
    payload, payload_bits = table.encode(lq.symbols)
    ms, me = _encode_pow2(lq.mu[0])
    ps, pe = _encode_pow2(lq.mu[1])
    record = bytearray()
    record += struct.pack("<H", len(name))
    record += name
    record += _FIXED.pack(
        _MODE_CODES[lq.mode], lq.n_bits, np.float32(lq.alpha), lq.bias,
        ms, me, ps, pe, np.float32(lq.sigma),
    )
    record += table.lengths.tobytes()
    record += struct.pack("<Q", payload_bits)
    record += payload
    record += struct.pack("<I", zlib.crc32(bytes(record)) & 0xFFFFFFFF)
    return bytes(record)


def decode_layer(data, offset: int = 0):
    """Parse one layer record; returns (LayerQuantization, next offset)."""
    view = memoryview(data)

    def take(count):
        nonlocal offset
        if offset + count > len(view):
            raise CorruptionError("truncated layer record")
        chunk = view[offset : offset + count]
        offset += count
        return chunk

    start = offset
    (name_len,) = struct.unpack("<H", take(2))
    name = bytes(take(name_len)).decode("utf-8")
    mode_code, n_bits, alpha, bias, ms, me, ps, pe, sigma = _FIXED.unpack(
        take(_FIXED.size)
    )
    if mode_code not in _MODE_NAMES:
        raise FormatError(f"bad mode byte {mode_code}")
    if not 3 <= n_bits <= 8:
        raise FormatError(f"bad bit width {n_bits}")
    lengths = np.frombuffer(take(1 << n_bits), dtype=np.uint8).copy()
    (payload_bits,) = struct.unpack("<Q", take(8))
    payload = bytes(take((payload_bits + 7) // 8))
    (stored_crc,) = struct.unpack("<I", take(4))
    actual_crc = zlib.crc32(bytes(view[start : offset - 4])) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CorruptionError(
            f"layer {name!r}: checksum mismatch "
            f"(stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )
    table = HuffmanTable(lengths)
    symbols = table.decode(payload, payload_bits)
    try:
        lq = LayerQuantization(
            name=name, mode=_MODE_NAMES[mode_code], n_bits=n_bits,
            alpha=float(alpha), bias=int(bias),
            mu=(_decode_pow2(ms, me), _decode_pow2(ps, pe)),
            sigma=float(sigma), symbols=symbols,
        )
    except ValueError as exc:
        raise FormatError(f"layer {name!r}: {exc}") from exc
    return lq, offset


@dataclass
class CompressedModel:
    """Ordered quantized layers; the on-disk form of a compressed model."""

    layers: list
    version: int = VERSION

    def __post_init__(self):
        names = [lq.name for lq in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")

    def layer(self, name: str) -> LayerQuantization:
        for lq in self.layers:
            if lq.name == name:
                return lq
        raise KeyError(name)


def encode_compressed(cm: CompressedModel) -> bytes:
    out = bytearray(struct.pack("<4sH", MAGIC, cm.version))
    for lq in cm.layers:
        out += encode_layer(lq)
    return bytes(out)


def decode_compressed(data: bytes) -> CompressedModel:
    if len(data) < 6:
        raise CorruptionError("file shorter than the container header")
    magic, version = struct.unpack("<4sH", data[:6])
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    offset = 6
    layers = []
    while offset < len(data):
        lq, offset = decode_layer(data, offset)
        layers.append(lq)
    try:
        return CompressedModel(layers, version=version)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_compressed(cm: CompressedModel, path) -> int:
    data = encode_compressed(cm)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_compressed(path) -> CompressedModel:
    with open(path, "rb") as fh:
        return decode_compressed(fh.read())


def compression_ratio(orig_bytes: int, comp_bytes: int) -> float:
    if comp_bytes <= 0:
        raise ValueError("compressed size must be positive")
    return orig_bytes / comp_bytes


@dataclass
class ReportRow:
    layer: str
    mode: str
    bits: int
    orig_bytes: int
    comp_bytes: int
    cr: float
    sparsity: float


def compression_report(model: ModelFile, cm: CompressedModel):
    """Per-layer size rows plus a "total" row.

    Original bytes count 4 per weight (the dense float baseline); compressed
    bytes are the exact record sizes, and the total row includes the 6-byte
    container header. Sparsity is the fraction of symbols decoding to zero.
    """
    model_names = [layer.name for layer in model.layers]
    cm_names = [lq.name for lq in cm.layers]
    if set(model_names) != set(cm_names):
        raise ValueError(
            f"layer names differ: model {sorted(model_names)} vs "
            f"compressed {sorted(cm_names)}"
        )
    rows = []
    total_comp = 6
    total_zero = 0
    total_count = 0
    for layer in model.layers:
        lq = cm.layer(layer.name)
        if lq.weight_count != layer.weight_count:
            raise ValueError(f"layer {layer.name!r}: weight counts differ")
        orig = 4 * layer.weight_count
        comp = len(encode_layer(lq))
        rows.append(
            ReportRow(
                layer.name, lq.mode, lq.n_bits, orig, comp,
                compression_ratio(orig, comp), lq.zero_fraction,
            )
        )
        total_comp += comp
        total_zero += int(np.count_nonzero(lq.symbols == 0))
        total_count += lq.weight_count
    rows.append(
        ReportRow(
            "total", "-", 0, weight_payload_bytes(model), total_comp,
            compression_ratio(weight_payload_bytes(model), total_comp),
            total_zero / total_count if total_count else 0.0,
        )
    )
    return rows


def report_to_csv(rows) -> str:
    lines = [REPORT_HEADER]
    for r in rows:
        lines.append(
            f"{r.layer},{r.mode},{r.bits},{r.orig_bytes},{r.comp_bytes},"
            f"{r.cr:.2f},{r.sparsity:.4f}"
        )
    return "\n".join(lines) + "\n"
