"""On-disk formats: a plain float32 tensor archive and the quantized model file.

Both layouts are described byte-for-byte in ``docs/format.md``.  Readers
validate every length before slicing so that a damaged file fails with a
:class:`CorruptFileError` naming the section and byte offset.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import CorruptFileError, InvalidRecordError, UnsupportedFormatError
from .hadamard import RotationRecord, is_power_of_two, largest_power_of_two, pack_signs, unpack_signs
from .quantizer import MAX_BITS, MIN_BITS, PackedCodes, packed_size
from .rabitq_h import STORAGE_DTYPE, QuantizedLayer
from .transforms import TrickKind, TrickRecord

ARCHIVE_MAGIC = b"RTAR"
ARCHIVE_VERSION = 1
ALIGNMENT = 64

MODEL_MAGIC = b"RAAN"
MODEL_VERSION = 1

_LE_F16 = np.dtype("<f2")
_LE_F32 = np.dtype("<f4")


def _json_bytes(obj: Any) -> bytes:
    # sorted keys and fixed separators keep serialization byte-stable
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _align(n: int) -> int:
    return -(-n // ALIGNMENT) * ALIGNMENT


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFileError(
                f"need {n} bytes but only {len(self.data) - self.pos} remain", section=section, offset=self.pos
            )
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def varint(self, section: str) -> int:
        start, value, shift = self.pos, 0, 0
        while True:
            (byte,) = self.take(1, section)
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise CorruptFileError("varint longer than 64 bits", section=section, offset=start)

    def remaining(self) -> int:
        return len(self.data) - self.pos


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varints encode non-negative integers only")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


# ---------------------------------------------------------------- tensor archive


def archive_to_bytes(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    """Serialize named real matrices as little-endian float32, 64-byte aligned."""
    names = list(tensors)
    arrays = [np.ascontiguousarray(np.asarray(tensors[n], dtype=_LE_F32)) for n in names]
    for name, a in zip(names, arrays):
        if not np.all(np.isfinite(a)):
            raise InvalidRecordError(f"tensor {name!r} is not finite")

    def manifest_for(base: int) -> bytes:
        entries, offset = [], base
        for name, a in zip(names, arrays):
            entries.append({"name": name, "shape": list(a.shape), "dtype": "float32", "offset": offset,
                            "nbytes": a.nbytes})
            offset = _align(offset + a.nbytes)
        return _json_bytes({"version": ARCHIVE_VERSION, "tensors": entries, "metadata": dict(metadata or {})})

    # the manifest length feeds back into the offsets; iterate to a fixed point
    base = _align(8 + len(manifest_for(0)))
    while True:
        manifest = manifest_for(base)
        need = _align(8 + len(manifest))
        if need == base:
            break
        base = need
    out = bytearray(ARCHIVE_MAGIC + struct.pack("<I", len(manifest)) + manifest)
    for a in arrays:
        out += b"\0" * (_align(len(out)) - len(out))
        out += a.tobytes()
    return bytes(out)


def archive_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data)
    if len(data) < 4 or r.take(4, "archive magic") != ARCHIVE_MAGIC:
        raise UnsupportedFormatError("not a tensor archive (bad magic)")
    (hlen,) = r.unpack("<I", "archive header length")
    try:
        manifest = json.loads(r.take(hlen, "archive manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"manifest is not valid JSON: {exc}", section="archive manifest", offset=8) from None
    if not isinstance(manifest, dict) or manifest.get("version") != ARCHIVE_VERSION:
        raise UnsupportedFormatError(f"unsupported archive version {manifest.get('version') if isinstance(manifest, dict) else None}")
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for i, entry in enumerate(manifest.get("tensors", [])):
        section = f"tensor {entry.get('name', i)!r}"
        try:
            name, shape, offset, nbytes = entry["name"], [int(s) for s in entry["shape"]], int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CorruptFileError("malformed manifest entry", section=section, offset=8) from None
        if entry.get("dtype") != "float32":
            raise UnsupportedFormatError(f"{section}: unsupported element type {entry.get('dtype')!r}")
        if any(s < 0 for s in shape) or math.prod(shape) * 4 != nbytes:
            raise CorruptFileError(f"shape {shape} does not match {nbytes} payload bytes", section=section, offset=offset)
        if offset % ALIGNMENT or offset < 8 + hlen or offset + nbytes > len(data):
            raise CorruptFileError("payload outside the file or misaligned", section=section, offset=offset)
        if name in tensors:
            raise CorruptFileError(f"duplicate tensor name {name!r}", section=section, offset=offset)
        spans.append((offset, offset + nbytes, section))
        tensors[name] = np.frombuffer(data, dtype=_LE_F32, count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
    spans.sort()
    for (_, end, _), (start, _, section) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptFileError("payload overlaps the previous tensor", section=section, offset=start)
    return tensors, dict(manifest.get("metadata", {}))


def save_archive(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(archive_to_bytes(tensors, metadata))


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    return archive_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- quantized model


def _half_bytes(a: np.ndarray, what: str) -> bytes:
    a = np.asarray(a)
    half = a.astype(_LE_F16)
    if not np.array_equal(half.astype(np.float64), a.astype(np.float64), equal_nan=False):
        raise InvalidRecordError(f"{what} is not exactly representable in half precision")
    return np.ascontiguousarray(half).tobytes()


def _encode_trick(rec: TrickRecord) -> bytes:
    out = bytearray([int(rec.kind)])
    if rec.kind is TrickKind.CENTRALIZATION:
        out += _half_bytes(rec.mean_row, "centralization mean row")
        return bytes(out)
    out += encode_varint(rec.mask.size)
    prev = -1
    for idx in rec.mask.tolist():
        out += encode_varint(idx - prev - 1)
        prev = idx
    out += _half_bytes(rec.retained, f"{rec.kind.name.lower()} retained slice")
    return bytes(out)


def _encode_layer(layer: QuantizedLayer) -> bytes:
    name = layer.name.encode("utf-8")
    out = bytearray(struct.pack("<H", len(name)) + name)
    out += struct.pack("<IIB", layer.d, layer.c, layer.bits)
    out += pack_signs(layer.rotation.signs_front)
    if layer.rotation.signs_back is not None:
        out += pack_signs(layer.rotation.signs_back)
    out += _half_bytes(layer.rescales, "rescale vector")
    out += layer.codes.data
    out += struct.pack("<B", len(layer.tricks))
    for rec in layer.tricks:
        out += _encode_trick(rec)
    return bytes(out)


def model_to_bytes(layers: Sequence[QuantizedLayer], metadata: Mapping | None = None) -> bytes:
    out = bytearray(MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(layers)))
    for layer in layers:
        out += _encode_layer(layer)
    trailer = _json_bytes(dict(metadata or {}))
    out += struct.pack("<I", len(trailer)) + trailer
    return bytes(out)


def _read_half(r: _Reader, count: int, section: str) -> np.ndarray:
    return np.frombuffer(r.take(2 * count, section), dtype=_LE_F16).astype(STORAGE_DTYPE)


def _decode_trick(r: _Reader, d: int, c: int, section: str) -> TrickRecord:
    start = r.pos
    (kind_byte,) = r.unpack("<B", section)
    try:
        kind = TrickKind(kind_byte)
    except ValueError:
        raise CorruptFileError(f"unknown trick kind {kind_byte}", section=section, offset=start) from None
    if kind is TrickKind.CENTRALIZATION:
        return TrickRecord(kind, mean_row=_read_half(r, c, section + " mean row"))
    count = r.varint(section + " mask")
    limit = d if kind is TrickKind.ROW_OUTLIER else c
    if count > limit:
        raise CorruptFileError(f"mask of {count} entries exceeds dimension {limit}", section=section, offset=start)
    mask, prev = [], -1
    for _ in range(count):
        prev += r.varint(section + " mask") + 1
        if prev >= limit:
            raise CorruptFileError(f"mask index {prev} out of range {limit}", section=section, offset=r.pos)
        mask.append(prev)
    shape = (count, c) if kind is TrickKind.ROW_OUTLIER else (d, count)
    retained = _read_half(r, shape[0] * shape[1], section + " retained slice").reshape(shape)
    return TrickRecord(kind, mask=np.asarray(mask, dtype=np.int64), retained=retained)


def _decode_layer(r: _Reader, k: int) -> QuantizedLayer:
    sec = f"layer {k}"
    (nlen,) = r.unpack("<H", sec + " name")
    try:
        name = r.take(nlen, sec + " name").decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptFileError("layer name is not UTF-8", section=sec + " name", offset=r.pos - nlen) from None
    head = r.pos
    d, c, bits = r.unpack("<IIB", sec + " header")
    if d < 1 or c < 1 or not MIN_BITS <= bits <= MAX_BITS:
        raise CorruptFileError(f"invalid layer header d={d} c={c} bits={bits}", section=sec + " header", offset=head)
    p = largest_power_of_two(d)
    nsign = (p + 7) // 8
    front = unpack_signs(r.take(nsign, sec + " signs"), p)
    back = None if is_power_of_two(d) else unpack_signs(r.take(nsign, sec + " signs"), p)
    rescales = _read_half(r, c, sec + " rescales").astype(np.float32)
    if not np.all(np.isfinite(rescales)):
        raise CorruptFileError("non-finite rescale", section=sec + " rescales", offset=r.pos - 2 * c)
    codes = PackedCodes(r.take(packed_size(d * c, bits), sec + " codes"), bits, d * c)
    (ntricks,) = r.unpack("<B", sec + " tricks")
    tricks = [_decode_trick(r, d, c, f"{sec} trick {i}") for i in range(ntricks)]
    return QuantizedLayer(d, c, bits, RotationRecord(d, front, back), codes, rescales, tricks, name)


def model_from_bytes(data: bytes) -> tuple[list[QuantizedLayer], dict]:
    r = _Reader(data)
    if len(data) < 4 or r.take(4, "magic") != MODEL_MAGIC:
        raise UnsupportedFormatError("not a quantized model file (bad magic)")
    (version,) = r.unpack("<H", "version")
    if version != MODEL_VERSION:
        raise UnsupportedFormatError(f"unsupported model format version {version}; this reader handles {MODEL_VERSION}")
    (nlayers,) = r.unpack("<I", "layer count")
    layers = [_decode_layer(r, k) for k in range(nlayers)]
    (tlen,) = r.unpack("<I", "trailer length")
    start = r.pos
    try:
        metadata = json.loads(r.take(tlen, "trailer").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"trailer is not valid JSON: {exc}", section="trailer", offset=start) from None
    if not isinstance(metadata, dict):
        raise CorruptFileError("trailer must hold a JSON object", section="trailer", offset=start)
    if r.remaining():
        raise CorruptFileError(f"{r.remaining()} unexpected bytes after the trailer", section="end of file", offset=r.pos)
    return layers, metadata


def write_model(layers: Sequence[QuantizedLayer], metadata: Mapping | None, path) -> int:
    """Write the model file; returns its size in bytes."""
    data = model_to_bytes(layers, metadata)
    Path(path).write_bytes(data)
    return len(data)


def read_model(path) -> tuple[list[QuantizedLayer], dict]:
    return model_from_bytes(Path(path).read_bytes())


def layer_overhead_bits(layer: QuantizedLayer) -> dict:
    """Serialized size of one layer record split into code and non-code bits."""
    total = 8 * len(_encode_layer(layer))
    code = 8 * packed_size(layer.d * layer.c, layer.bits)
    return {"total_bits": total, "code_bits": code, "overhead_bits": total - code}
