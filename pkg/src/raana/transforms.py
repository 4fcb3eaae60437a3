"""Invertible pre-quantization tricks on a weight matrix ``W`` (``d x c``).

Each trick rewrites ``W`` before it is quantized and returns a
:class:`TrickRecord` holding what is needed to recover ``X @ W`` exactly
from the product with the rewritten matrix:

* centralization subtracts the mean row ``mu``; add back ``(X 1) mu^T``.
* row outliers zero the highest-norm rows; add back ``X[:, rows] @ retained``.
* column outliers zero the highest-norm columns; overwrite those outputs
  with ``X @ retained``.

Records are undone in reverse order of application.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidRecordError

DEFAULT_OUTLIER_RATIO = 0.003


class TrickKind(enum.IntEnum):
    CENTRALIZATION = 1
    ROW_OUTLIER = 2
    COL_OUTLIER = 3


@dataclass(eq=False)
class TrickRecord:
    kind: TrickKind
    mean_row: np.ndarray | None = None
    mask: np.ndarray | None = None
    retained: np.ndarray | None = None

    def __post_init__(self):
        self.kind = TrickKind(self.kind)
        if self.kind is TrickKind.CENTRALIZATION:
            if self.mean_row is None or np.ndim(self.mean_row) != 1:
                raise InvalidRecordError("centralization record needs a 1-D mean row")
            return
        if self.mask is None or self.retained is None:
            raise InvalidRecordError(f"{self.kind.name.lower()} record needs a mask and a retained slice")
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.mask.ndim != 1 or np.any(np.diff(self.mask) <= 0) or (self.mask.size and self.mask[0] < 0):
            raise InvalidRecordError("mask must be a strictly increasing list of non-negative indices")
        axis = 0 if self.kind is TrickKind.ROW_OUTLIER else 1
        if np.ndim(self.retained) != 2 or self.retained.shape[axis] != self.mask.size:
            raise InvalidRecordError(
                f"retained slice of shape {np.shape(self.retained)} does not match {self.mask.size} masked indices"
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrickRecord) or self.kind != other.kind:
            return NotImplemented if not isinstance(other, TrickRecord) else False
        for name in ("mean_row", "mask", "retained"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.dtype != b.dtype or not np.array_equal(a, b)):
                return False
        return True


@dataclass(frozen=True)
class TrickFlags:
    """Which tricks ``quantize_layer`` applies (in the order listed)."""

    centralization: bool = True
    row_outlier: bool = False
    col_outlier: bool = True
    outlier_ratio: float = DEFAULT_OUTLIER_RATIO

    @classmethod
    def none(cls) -> "TrickFlags":
        return cls(centralization=False, row_outlier=False, col_outlier=False)

    @classmethod
    def parse(cls, spec: str) -> "TrickFlags":
        """Parse a comma list such as ``"cent,col-out"``; ``""``/``"none"`` disables all."""
        names = {"cent": "centralization", "row-out": "row_outlier", "col-out": "col_outlier"}
        chosen = {v: False for v in names.values()}
        for token in filter(None, (t.strip() for t in spec.split(","))):
            if token == "none":
                continue
            if token not in names:
                raise InvalidInputError(f"unknown trick {token!r}; expected one of {sorted(names)}")
            chosen[names[token]] = True
        return cls(**chosen)

    def to_string(self) -> str:
        parts = [n for n, on in (("cent", self.centralization), ("row-out", self.row_outlier),
                                 ("col-out", self.col_outlier)) if on]
        return ",".join(parts) or "none"


def outlier_count(dim: int, ratio: float) -> int:
    if not 0 < ratio < 1:
        raise InvalidInputError(f"outlier ratio must lie in (0, 1), got {ratio}")
    # round first so 0.003 * 1000 does not ceil to 4
    return max(1, math.ceil(round(ratio * dim, 9))) if dim > 0 else 0


def _top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score: equal scores keep ascending index order
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def _stored(a: np.ndarray, precision) -> np.ndarray:
    return np.ascontiguousarray(a if precision is None else a.astype(precision))


def _as_float(W) -> np.ndarray:
    W = np.asarray(W)
    if W.ndim != 2:
        raise InvalidInputError(f"expected a 2-D weight matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvalidInputError("weights must be finite")
    return W.astype(np.result_type(W.dtype, np.float32), copy=True)


def apply_centralization(W, precision=None) -> tuple[np.ndarray, TrickRecord]:
    """Subtract the mean row.

    With ``precision`` (e.g. ``np.float16``) the stored mean is rounded to that
    type first and the rounded mean is subtracted, so the correction stays exact.
    """
    W = _as_float(W)
    mu = _stored(W.mean(axis=0), precision)
    W -= mu.astype(W.dtype)
    return W, TrickRecord(TrickKind.CENTRALIZATION, mean_row=mu)


def split_row_outliers(
    W,
    ratio: float = DEFAULT_OUTLIER_RATIO,
    statistic: Callable[[np.ndarray], np.ndarray] | None = None,
    precision=None,
) -> tuple[np.ndarray, TrickRecord]:
    """Zero the ``ceil(ratio * d)`` rows with the largest Euclidean norm.

    ``statistic`` maps ``W`` to one score per row and replaces the norm.
    """
    W = _as_float(W)
    scores = np.linalg.norm(W, axis=1) if statistic is None else np.asarray(statistic(W), dtype=np.float64)
    if scores.shape != (W.shape[0],):
        raise InvalidInputError("row statistic must return one score per row")
    mask = _top_indices(scores, outlier_count(W.shape[0], ratio))
    retained = _stored(W[mask, :], precision)
    W[mask, :] = 0
    return W, TrickRecord(TrickKind.ROW_OUTLIER, mask=mask, retained=retained)


def split_col_outliers(
    W,
    ratio: float = DEFAULT_OUTLIER_RATIO,
    statistic: Callable[[np.ndarray], np.ndarray] | None = None,
    precision=None,
) -> tuple[np.ndarray, TrickRecord]:
    """Zero the ``ceil(ratio * c)`` columns with the largest Euclidean norm."""
    W = _as_float(W)
    scores = np.linalg.norm(W, axis=0) if statistic is None else np.asarray(statistic(W), dtype=np.float64)
    if scores.shape != (W.shape[1],):
        raise InvalidInputError("column statistic must return one score per column")
    mask = _top_indices(scores, outlier_count(W.shape[1], ratio))
    retained = _stored(W[:, mask], precision)
    W[:, mask] = 0
    return W, TrickRecord(TrickKind.COL_OUTLIER, mask=mask, retained=retained)


def apply_tricks(W, flags: TrickFlags, precision=None) -> tuple[np.ndarray, list[TrickRecord]]:
    records: list[TrickRecord] = []
    W = _as_float(W)
    if flags.centralization:
        W, rec = apply_centralization(W, precision)
        records.append(rec)
    if flags.row_outlier:
        W, rec = split_row_outliers(W, flags.outlier_ratio, precision=precision)
        records.append(rec)
    if flags.col_outlier:
        W, rec = split_col_outliers(W, flags.outlier_ratio, precision=precision)
        records.append(rec)
    return W, records


def _check_record(rec: TrickRecord, d: int, c: int) -> None:
    if rec.kind is TrickKind.CENTRALIZATION:
        if rec.mean_row.shape != (c,):
            raise InvalidRecordError(f"mean row of length {rec.mean_row.shape[0]} does not match {c} outputs")
    elif rec.kind is TrickKind.ROW_OUTLIER:
        if rec.retained.shape[1] != c or (rec.mask.size and rec.mask[-1] >= d):
            raise InvalidRecordError("row-outlier record does not fit a layer of this shape")
    else:
        if rec.retained.shape[0] != d or (rec.mask.size and rec.mask[-1] >= c):
            raise InvalidRecordError("column-outlier record does not fit a layer of this shape")


def invert_tricks(Y_est, X, records: Sequence[TrickRecord]) -> np.ndarray:
    """Correct an estimate of ``T(W)``-products back to ``X @ W``."""
    Y = np.array(Y_est, copy=True)
    X = np.asarray(X)
    if Y.ndim != 2 or X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise InvalidRecordError(f"estimate of shape {Y.shape} does not pair with input of shape {X.shape}")
    n, c = Y.shape
    d = X.shape[1]
    dtype = Y.dtype
    for rec in reversed(records):
        _check_record(rec, d, c)
        if rec.kind is TrickKind.CENTRALIZATION:
            Y += np.outer(X.sum(axis=1), rec.mean_row).astype(dtype)
        elif rec.kind is TrickKind.ROW_OUTLIER:
            Y += (X[:, rec.mask] @ rec.retained.astype(X.dtype)).astype(dtype)
        else:
            Y[:, rec.mask] = X @ rec.retained.astype(X.dtype)
    return Y


def invert_tricks_weight(W_main, records: Sequence[TrickRecord]) -> np.ndarray:
    """Rebuild the effective weight from the tricked matrix; weight-side twin of :func:`invert_tricks`."""
    W = np.array(W_main, copy=True)
    d, c = W.shape
    for rec in reversed(records):
        _check_record(rec, d, c)
        if rec.kind is TrickKind.CENTRALIZATION:
            W += rec.mean_row.astype(W.dtype)[None, :]
        elif rec.kind is TrickKind.ROW_OUTLIER:
            W[rec.mask, :] += rec.retained.astype(W.dtype)
        else:
            W[:, rec.mask] = rec.retained.astype(W.dtype)
    return W
