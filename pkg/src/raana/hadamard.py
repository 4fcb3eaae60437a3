"""Normalized fast Walsh-Hadamard transform and randomized rotations.

All transforms act along one axis of an array, so a ``(d, c)`` weight matrix
is rotated column-wise with ``axis=0`` and an ``(n, d)`` activation matrix
row-wise with ``axis=-1``.  Float32 inputs are transformed in float32;
float64 inputs stay in float64 (the reference path used by tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimensionError, InvalidRecordError


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def largest_power_of_two(n: int) -> int:
    if n < 1:
        raise InvalidDimensionError(f"dimension must be positive, got {n}")
    return 1 << (n.bit_length() - 1)


@dataclass
class OpCounter:
    """Tally of scalar additions/subtractions performed by :func:`fwht`."""

    add_sub: int = 0


def _float_array(x) -> np.ndarray:
    x = np.asarray(x)
    return x.astype(np.result_type(x.dtype, np.float32), copy=True)


def fwht(x, axis: int = -1, counter: OpCounter | None = None) -> np.ndarray:
    """Return ``H_d x / sqrt(d)`` along ``axis``.

    Iterative in-place butterfly on a private copy.  Each of the ``log2 d``
    stages performs ``d/2`` additions and ``d/2`` subtractions per vector.
    """
    y = _float_array(x)
    if y.ndim == 0:
        raise InvalidDimensionError("fwht needs at least one axis")
    d = y.shape[axis]
    if not is_power_of_two(d):
        raise InvalidDimensionError(f"Hadamard size must be a power of two, got {d}")
    shape = y.shape
    axis = axis % y.ndim
    # butterflies act on contiguous runs of h * post entries, so no transpose is needed
    pre = math.prod(shape[:axis])
    post = math.prod(shape[axis + 1:])
    y = np.ascontiguousarray(y)
    n_vectors = pre * post
    h = 1
    while h < d:
        view = y.reshape(pre, d // (2 * h), 2, h * post)
        a = view[:, :, 0, :].copy()
        b = view[:, :, 1, :]
        view[:, :, 0, :] += b
        # b is a view into y, so the subtraction lands in place
        np.subtract(a, b, out=b)
        if counter is not None:
            counter.add_sub += d * n_vectors
        h *= 2
    y *= y.dtype.type(1.0 / math.sqrt(d))
    return y.reshape(shape)


def _check_signs(signs: np.ndarray, d: int) -> np.ndarray:
    signs = np.asarray(signs)
    if signs.ndim != 1 or signs.shape[0] != d:
        raise InvalidDimensionError(f"sign vector of length {signs.shape} does not match dimension {d}")
    return signs


def _broadcast_signs(signs: np.ndarray, ndim: int, axis: int, dtype) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = signs.shape[0]
    return signs.astype(dtype).reshape(shape)


def rht_forward(x, signs, axis: int = -1) -> np.ndarray:
    """Randomized Hadamard transform ``fwht(diag(signs) x)``."""
    y = _float_array(x)
    axis = axis % y.ndim
    signs = _check_signs(signs, y.shape[axis])
    y *= _broadcast_signs(signs, y.ndim, axis, y.dtype)
    return fwht(y, axis=axis)


def rht_inverse(y, signs, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`rht_forward`: ``diag(signs) fwht(y)``."""
    y = np.asarray(y)
    axis = axis % max(y.ndim, 1)
    signs = _check_signs(signs, y.shape[axis])
    out = fwht(y, axis=axis)
    out *= _broadcast_signs(signs, out.ndim, axis, out.dtype)
    return out


def random_signs(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` Rademacher signs as an int8 array of +1/-1."""
    bits = rng.integers(0, 2, size=n, dtype=np.int8)
    return (1 - 2 * bits).astype(np.int8)


def pack_signs(signs: np.ndarray) -> bytes:
    """Bitfield with 1 meaning -1, most-significant bit first in each byte."""
    signs = np.asarray(signs)
    if not np.all(np.abs(signs) == 1):
        raise InvalidRecordError("sign vector entries must be +1 or -1")
    return np.packbits(signs < 0, bitorder="big").tobytes()


def unpack_signs(data: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n, bitorder="big")
    return (1 - 2 * bits.astype(np.int8)).astype(np.int8)


@dataclass(frozen=True, eq=False)
class RotationRecord:
    """Sign vectors of the practical randomized Hadamard transform.

    For a power-of-two ``dim`` only ``signs_front`` exists.  Otherwise the
    front block covers coordinates ``[0, pow2_dim)`` and the back block
    ``[dim - pow2_dim, dim)``; the overlap is rotated twice.
    """

    dim: int
    signs_front: np.ndarray
    signs_back: np.ndarray | None = None

    def __post_init__(self):
        p = largest_power_of_two(self.dim)
        if self.signs_front.shape != (p,):
            raise InvalidRecordError(f"front signs must have length {p}")
        if is_power_of_two(self.dim):
            if self.signs_back is not None:
                raise InvalidRecordError("power-of-two dimension takes a single sign vector")
        elif self.signs_back is None or self.signs_back.shape != (p,):
            raise InvalidRecordError(f"back signs must have length {p}")

    @property
    def pow2_dim(self) -> int:
        return largest_power_of_two(self.dim)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "RotationRecord":
        p = largest_power_of_two(dim)
        front = random_signs(p, rng)
        back = None if p == dim else random_signs(p, rng)
        return cls(dim, front, back)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RotationRecord):
            return NotImplemented
        if self.dim != other.dim or not np.array_equal(self.signs_front, other.signs_front):
            return False
        if self.signs_back is None or other.signs_back is None:
            return self.signs_back is None and other.signs_back is None
        return np.array_equal(self.signs_back, other.signs_back)


def _check_record_dim(x: np.ndarray, rec: RotationRecord, axis: int) -> None:
    if x.shape[axis] != rec.dim:
        raise InvalidDimensionError(f"vector dimension {x.shape[axis]} does not match rotation dimension {rec.dim}")


def practical_rht(x, rec: RotationRecord, axis: int = -1) -> np.ndarray:
    """Orthonormal RHT for arbitrary dimension (two overlapping power-of-two blocks)."""
    y = _float_array(x)
    axis = axis % y.ndim
    _check_record_dim(y, rec, axis)
    if rec.signs_back is None:
        return rht_forward(y, rec.signs_front, axis=axis)
    p, d = rec.pow2_dim, rec.dim
    y = np.moveaxis(y, axis, -1)
    y[..., :p] = rht_forward(y[..., :p], rec.signs_front)
    y[..., d - p:] = rht_forward(y[..., d - p:], rec.signs_back)
    return np.moveaxis(y, -1, axis)


def practical_rht_inverse(y, rec: RotationRecord, axis: int = -1) -> np.ndarray:
    """Undo :func:`practical_rht`: back block first, then front block."""
    x = _float_array(y)
    axis = axis % x.ndim
    _check_record_dim(x, rec, axis)
    if rec.signs_back is None:
        return rht_inverse(x, rec.signs_front, axis=axis)
    p, d = rec.pow2_dim, rec.dim
    x = np.moveaxis(x, axis, -1)
    x[..., d - p:] = rht_inverse(x[..., d - p:], rec.signs_back)
    x[..., :p] = rht_inverse(x[..., :p], rec.signs_front)
    return np.moveaxis(x, -1, axis)
