"""Multi-bit grid quantization of rotated columns.

A column ``w`` is stored as unsigned ``b``-bit codes ``u`` and a rescale
factor ``t``.  It is reconstructed as ``t * (u - c_b)`` with the grid
midpoint ``c_b = (2**b - 1) / 2``, and inner products against a query are
estimated directly from the integer codes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CodeRangeError, CorruptDataError, InvalidBitWidthError, InvalidDimensionError, InvalidInputError

MIN_BITS = 1
MAX_BITS = 15
DEFAULT_GRID_SIZE = 64


def grid_midpoint(bits: int) -> float:
    return (2**bits - 1) / 2


def check_bits(bits: int) -> int:
    if isinstance(bits, bool) or not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise InvalidBitWidthError(f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def code_dtype(bits: int):
    return np.uint8 if bits <= 8 else np.uint16


@dataclass(eq=False)
class ColumnCode:
    codes: np.ndarray
    bits: int
    rescale: float

    def __post_init__(self):
        check_bits(self.bits)
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 1:
            raise InvalidDimensionError("column codes must be one-dimensional")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= 2**self.bits):
            raise CodeRangeError(f"codes must lie in [0, {2**self.bits - 1}]")
        if not np.isfinite(self.rescale) or self.rescale < 0:
            raise InvalidInputError(f"rescale must be finite and non-negative, got {self.rescale}")

    @property
    def dim(self) -> int:
        return self.codes.shape[0]


def quantize_matrix(W, bits: int, grid_size: int = DEFAULT_GRID_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Quantize every column of ``W`` (shape ``(d, c)``).

    For each column, step sizes ``g * step_max / grid_size`` (``g = 1..grid_size``)
    are tried, where ``step_max`` maps the largest magnitude onto the outermost
    grid level.  Codes come from round-half-up of ``w / step + c_b`` clamped to
    ``[0, 2**b - 1]``; the rescale is then the least-squares optimum
    ``<w, v> / |v|^2`` with ``v = u - c_b``.  The candidate with the smallest
    reconstruction error wins; ties keep the smaller step.

    Returns ``(codes, rescales)`` with codes of shape ``(d, c)``.
    """
    bits = check_bits(bits)
    W = np.asarray(W)
    if W.ndim != 2:
        raise InvalidDimensionError(f"expected a 2-D matrix, got shape {W.shape}")
    if W.shape[0] < 1:
        raise InvalidDimensionError("columns must have at least one entry")
    if not np.all(np.isfinite(W)):
        raise InvalidInputError("weights must be finite")
    if grid_size < 1:
        raise InvalidInputError("grid_size must be positive")
    W = W.astype(np.result_type(W.dtype, np.float32), copy=False)
    dtype = W.dtype.type
    top = 2**bits - 1
    mid = dtype(grid_midpoint(bits))
    d, c = W.shape

    max_abs = np.abs(W).max(axis=0)
    nonzero = max_abs > 0
    step_max = np.where(nonzero, 2 * max_abs / top, 1).astype(W.dtype)
    w_sq = np.einsum("ij,ij->j", W, W)

    best_err = np.full(c, np.inf, dtype=W.dtype)
    best_g = np.ones(c, dtype=np.int64)
    v = np.empty_like(W)
    for g in range(1, grid_size + 1):
        _round_to_grid(W, step_max * dtype(g / grid_size), mid, top, out=v)
        v -= mid  # exact: codes and c_b are small half-integers
        wv = np.einsum("ij,ij->j", W, v)
        vv = np.einsum("ij,ij->j", v, v)
        err = w_sq - wv * wv / np.where(vv > 0, vv, 1)
        better = err < best_err
        best_err[better] = err[better]
        best_g[better] = g

    step = step_max * (best_g / grid_size).astype(W.dtype)
    best_codes = _round_to_grid(W, step, mid, top, out=v).astype(code_dtype(bits))
    v -= mid
    vv = np.einsum("ij,ij->j", v, v)
    best_t = np.einsum("ij,ij->j", W, v) / np.where(vv > 0, vv, 1)

    best_codes[:, ~nonzero] = 0
    best_t[~nonzero] = 0
    # t < 0 cannot beat t = 0 in least squares, but guard against rounding
    best_t = np.maximum(best_t, 0)
    return best_codes, best_t


def _round_to_grid(W: np.ndarray, step: np.ndarray, mid, top: int, out: np.ndarray) -> np.ndarray:
    """``clamp(floor(w / step + c_b + 1/2), 0, top)`` column-wise, written into ``out``."""
    np.divide(W, step, out=out)
    out += mid + out.dtype.type(0.5)
    np.floor(out, out=out)
    return np.clip(out, 0, top, out=out)


def quantize_column(w, bits: int, grid_size: int = DEFAULT_GRID_SIZE) -> ColumnCode:
    w = np.asarray(w)
    if w.ndim != 1:
        raise InvalidDimensionError("quantize_column expects a vector")
    codes, t = quantize_matrix(w[:, None], bits, grid_size)
    return ColumnCode(codes[:, 0], check_bits(bits), float(t[0]))


def reconstruct_column(code: ColumnCode) -> np.ndarray:
    return code.rescale * (code.codes.astype(np.float64) - grid_midpoint(code.bits))


def estimate_inner(code: ColumnCode, x) -> float:
    """``t * (<u, x> - c_b * sum(x))``, i.e. ``<reconstruct_column(code), x>``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (code.dim,):
        raise InvalidDimensionError(f"query of shape {x.shape} does not match code dimension {code.dim}")
    return code.rescale * (float(code.codes.astype(np.float64) @ x) - grid_midpoint(code.bits) * float(x.sum()))


@dataclass(frozen=True)
class PackedCodes:
    data: bytes
    bits: int
    length: int

    def __post_init__(self):
        check_bits(self.bits)
        expected = packed_size(self.length, self.bits)
        if len(self.data) != expected:
            raise CorruptDataError(f"packed buffer holds {len(self.data)} bytes, expected {expected}")


def packed_size(length: int, bits: int) -> int:
    return (length * bits + 7) // 8


def pack_codes(codes, bits: int) -> PackedCodes:
    """Pack codes as contiguous ``bits``-wide fields, least-significant bit first.

    Multi-dimensional inputs are flattened column-major.  The final partial
    byte is zero-padded.
    """
    bits = check_bits(bits)
    codes = np.asarray(codes)
    if codes.size and not np.issubdtype(codes.dtype, np.integer):
        raise CodeRangeError("codes must be integers")
    flat = np.ravel(codes, order="F").astype(np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= 2**bits):
        raise CodeRangeError(f"codes must lie in [0, {2**bits - 1}] for {bits}-bit packing")
    shifts = np.arange(bits, dtype=np.int64)
    bit_stream = ((flat[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    data = np.packbits(bit_stream, bitorder="little").tobytes()
    return PackedCodes(data, bits, int(flat.size))


def unpack_codes(packed: PackedCodes | bytes, bits: int | None = None, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns a flat code vector."""
    if isinstance(packed, PackedCodes):
        data, bits, length = packed.data, packed.bits, packed.length
    else:
        data = bytes(packed)
        if bits is None or length is None:
            raise InvalidInputError("raw byte input needs explicit bits and length")
        bits = check_bits(bits)
    need = packed_size(length, bits)
    if len(data) < need:
        raise CorruptDataError(f"packed stream truncated: {len(data)} bytes, need {need}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need)
    bit_stream = np.unpackbits(raw, count=length * bits, bitorder="little")
    weights = (1 << np.arange(bits, dtype=np.uint32)).astype(np.uint32)
    values = bit_stream.reshape(length, bits).astype(np.uint32) @ weights
    return values.astype(code_dtype(bits))
