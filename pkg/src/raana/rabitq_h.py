"""Layer-level quantization with randomized Hadamard preprocessing.

``quantize_layer`` applies the configured tricks, rotates every column of the
weight with a practical RHT, and grid-quantizes the rotated columns.
``estimate_mm`` rotates the rows of the input with the same signs and
evaluates

    Y[i, j] = r[j] * (<x~_i, u_j> - c_b * sum(x~_i))

from the integer codes, then applies the trick corrections.  This is exactly
``X @ dequantize_layer(layer)`` up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidDimensionError, InvalidInputError, InvalidRecordError
from .hadamard import RotationRecord, practical_rht, practical_rht_inverse
from .quantizer import PackedCodes, check_bits, grid_midpoint, pack_codes, quantize_matrix, unpack_codes
from .transforms import TrickFlags, TrickRecord, apply_tricks, invert_tricks, invert_tricks_weight

# rescales and trick payloads are persisted as IEEE half precision
STORAGE_DTYPE = np.float16


@dataclass(eq=False)
class QuantizedLayer:
    d: int
    c: int
    bits: int
    rotation: RotationRecord
    codes: PackedCodes
    rescales: np.ndarray
    tricks: list[TrickRecord] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        check_bits(self.bits)
        if self.rotation.dim != self.d:
            raise InvalidRecordError(f"rotation dimension {self.rotation.dim} does not match layer input {self.d}")
        if self.codes.bits != self.bits or self.codes.length != self.d * self.c:
            raise InvalidRecordError("packed codes do not match the layer shape and bit-width")
        self.rescales = np.asarray(self.rescales, dtype=np.float32)
        if self.rescales.shape != (self.c,) or not np.all(np.isfinite(self.rescales)):
            raise InvalidRecordError("rescales must be a finite vector with one entry per output column")

    @property
    def shape(self) -> tuple[int, int]:
        return self.d, self.c

    @cached_property
    def code_matrix(self) -> np.ndarray:
        """Unpacked ``(d, c)`` code matrix (codes are packed column-major)."""
        flat = unpack_codes(self.codes)
        return flat.reshape(self.c, self.d).T

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (
            (self.d, self.c, self.bits, self.name) == (other.d, other.c, other.bits, other.name)
            and self.rotation == other.rotation
            and self.codes == other.codes
            and np.array_equal(self.rescales.view(np.uint32), other.rescales.view(np.uint32))
            and len(self.tricks) == len(other.tricks)
            and all(a == b for a, b in zip(self.tricks, other.tricks))
        )


def quantize_layer(
    W,
    bits: int,
    tricks: TrickFlags | None = None,
    rng: np.random.Generator | int | None = None,
    name: str = "",
    rotation: RotationRecord | None = None,
) -> QuantizedLayer:
    """Quantize a ``(d, c)`` weight matrix to ``bits`` bits per entry.

    ``rng`` seeds the Rademacher signs (an int is wrapped in a Philox
    generator); pass ``rotation`` to reuse existing signs instead.  Rescales
    and trick payloads are rounded to half precision so the in-memory layer
    is exactly what the container stores.
    """
    bits = check_bits(bits)
    W = np.asarray(W)
    if W.ndim != 2 or min(W.shape) < 1:
        raise InvalidDimensionError(f"expected a non-empty 2-D weight matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvalidInputError("weights must be finite")
    tricks = TrickFlags.none() if tricks is None else tricks
    d, c = W.shape

    any_trick = tricks.centralization or tricks.row_outlier or tricks.col_outlier
    if any_trick and np.abs(W).max() > np.finfo(STORAGE_DTYPE).max:
        raise InvalidInputError("weights exceed the half-precision range used for trick payloads")
    W_main, records = apply_tricks(W.astype(np.float32), tricks, precision=STORAGE_DTYPE)
    if rotation is None:
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.Generator(np.random.Philox(rng))
        rotation = RotationRecord.random(d, rng)
    elif rotation.dim != d:
        raise InvalidDimensionError(f"rotation of dimension {rotation.dim} cannot rotate {d}-dim columns")

    rotated = practical_rht(W_main, rotation, axis=0)
    codes, rescales = quantize_matrix(rotated, bits)
    if np.any(rescales > np.finfo(STORAGE_DTYPE).max):
        raise InvalidInputError("rescale factor overflows half precision; weights are too large to store")
    stored = rescales.astype(STORAGE_DTYPE)
    return QuantizedLayer(
        d=d,
        c=c,
        bits=bits,
        rotation=rotation,
        codes=pack_codes(codes, bits),
        rescales=stored.astype(np.float32),
        tricks=records,
        name=name,
    )


def estimate_mm(X, layer: QuantizedLayer) -> np.ndarray:
    """Estimate ``X @ W`` for ``X`` of shape ``(n, d)`` from the quantized layer."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != layer.d:
        raise InvalidDimensionError(f"input of shape {X.shape} does not match layer input dimension {layer.d}")
    X_rot = practical_rht(X, layer.rotation, axis=-1)
    z = np.float32(grid_midpoint(layer.bits)) * X_rot.sum(axis=1)
    Y = X_rot @ layer.code_matrix.astype(np.float32)
    Y -= z[:, None]
    Y *= layer.rescales[None, :]
    return invert_tricks(Y, X, layer.tricks)


def dequantize_layer(layer: QuantizedLayer) -> np.ndarray:
    """The effective ``(d, c)`` weight that :func:`estimate_mm` multiplies by."""
    centered = layer.code_matrix.astype(np.float32) - np.float32(grid_midpoint(layer.bits))
    rotated = centered * layer.rescales[None, :]
    W_main = practical_rht_inverse(rotated, layer.rotation, axis=0)
    return invert_tricks_weight(W_main, layer.tricks)
