import itertools

import numpy as np
import pytest

from raana.container import _encode_trick
from raana.errors import InvalidInputError, InvalidRecordError
from raana.rabitq_h import dequantize_layer, estimate_mm, quantize_layer
from raana.transforms import (
    TrickFlags,
    TrickKind,
    TrickRecord,
    apply_centralization,
    apply_tricks,
    invert_tricks,
    invert_tricks_weight,
    outlier_count,
    split_col_outliers,
    split_row_outliers,
)

ALL_FLAGS = [
    TrickFlags(centralization=c, row_outlier=r, col_outlier=k)
    for c, r, k in itertools.product([False, True], repeat=3)
]


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_centralization_example():
    Wc, rec = apply_centralization(np.array([[1.0], [3.0]]))
    np.testing.assert_array_equal(Wc, [[-1], [1]])
    np.testing.assert_array_equal(rec.mean_row, [2])
    X = np.array([[1.0, 1.0]])
    assert (X @ Wc + X.sum(axis=1, keepdims=True) * rec.mean_row)[0, 0] == 4


def test_centralization_zero_mean_input_unchanged():
    W = np.array([[1.0, -2.0], [-1.0, 2.0]])
    Wc, rec = apply_centralization(W)
    np.testing.assert_array_equal(Wc, W)
    np.testing.assert_array_equal(rec.mean_row, [0, 0])


def test_centralization_random_means():
    Wc, _ = apply_centralization(np.random.default_rng(0).standard_normal((64, 16)).astype(np.float32))
    assert np.max(np.abs(Wc.mean(axis=0))) <= 1e-6


def test_outlier_count():
    assert outlier_count(400, 0.003) == 2
    assert outlier_count(1000, 0.003) == 3
    assert outlier_count(16, 0.003) == 1
    assert outlier_count(4096, 0.003) == 13
    with pytest.raises(InvalidInputError):
        outlier_count(10, 0.0)


def test_row_outlier_planted():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((400, 8))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    W[123] *= 100
    Wm, rec = split_row_outliers(W)
    assert 123 in rec.mask and rec.mask.size == 2
    np.testing.assert_array_equal(Wm[123], 0)
    np.testing.assert_array_equal(rec.retained[list(rec.mask).index(123)], W[123])


def test_row_outlier_ties_go_to_lowest_index():
    W = np.ones((1000, 4))
    _, rec = split_row_outliers(W)
    np.testing.assert_array_equal(rec.mask, [0, 1, 2])


def test_row_outlier_custom_statistic():
    W = np.ones((10, 3))
    _, rec = split_row_outliers(W, ratio=0.1, statistic=lambda M: np.arange(M.shape[0]))
    np.testing.assert_array_equal(rec.mask, [9])


def test_col_outlier_planted_and_minimum_one():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((32, 16))
    W[:, 5] *= 50
    Wm, rec = split_col_outliers(W)
    np.testing.assert_array_equal(rec.mask, [5])
    np.testing.assert_array_equal(Wm[:, 5], 0)
    assert rec.retained.shape == (32, 1)


def test_col_outlier_retained_storage_share():
    # one 16-bit value per retained entry, measured from the serialized record
    d, c = 64, 4096
    W = np.random.default_rng(3).standard_normal((d, c))
    _, rec = split_col_outliers(W, precision=np.float16)
    bits_per_param = 8 * len(_encode_trick(rec)) / (d * c)
    assert bits_per_param <= 0.003 * 16 + 0.01


def test_trick_budget_from_serialized_records():
    d = c = 4096
    W = np.random.default_rng(4).standard_normal((d, c)).astype(np.float32)
    _, records = apply_tricks(W, TrickFlags(centralization=True, row_outlier=True, col_outlier=True), np.float16)
    bits = 8 * sum(len(_encode_trick(r)) for r in records)
    assert bits / (d * c) <= 0.01 + 16 / d + 0.003 * 16 * 2


def test_invert_no_tricks_is_identity():
    Y = np.random.default_rng(5).standard_normal((3, 4))
    np.testing.assert_array_equal(invert_tricks(Y, np.ones((3, 6)), []), Y)


@pytest.mark.parametrize("flags", ALL_FLAGS, ids=lambda f: f.to_string())
def test_lossless_stub_reproduces_product(flags):
    rng = np.random.default_rng(6)
    W = rng.standard_normal((700, 400)) + 3.0
    W[17] *= 20
    W[:, 3] *= 20
    X = rng.standard_normal((9, 700))
    Wm, records = apply_tricks(W, TrickFlags(flags.centralization, flags.row_outlier, flags.col_outlier))
    Y = invert_tricks(X @ Wm, X, records)
    assert rel_fro(Y, X @ W) <= 1e-10
    np.testing.assert_allclose(invert_tricks_weight(Wm, records), W, rtol=0, atol=1e-12)


def test_lossless_stub_float32():
    rng = np.random.default_rng(7)
    W = (rng.standard_normal((64, 32)) + 1).astype(np.float32)
    X = rng.standard_normal((5, 64)).astype(np.float32)
    Wm, records = apply_tricks(W, TrickFlags(True, True, True))
    assert rel_fro(invert_tricks(X @ Wm, X, records).astype(np.float64), X.astype(np.float64) @ W) <= 1e-4


def test_order_cent_then_col_outlier():
    rng = np.random.default_rng(8)
    W = rng.standard_normal((50, 20)) + 2
    X = rng.standard_normal((4, 50))
    W1, r1 = apply_centralization(W)
    W2, r2 = split_col_outliers(W1, ratio=0.1)
    Y = invert_tricks(X @ W2, X, [r1, r2])
    assert rel_fro(Y, X @ W) <= 1e-12


def test_record_shape_mismatch():
    rec = TrickRecord(TrickKind.CENTRALIZATION, mean_row=np.zeros(3))
    with pytest.raises(InvalidRecordError):
        invert_tricks(np.zeros((2, 4)), np.zeros((2, 5)), [rec])
    rec = TrickRecord(TrickKind.COL_OUTLIER, mask=np.array([9]), retained=np.zeros((5, 1)))
    with pytest.raises(InvalidRecordError):
        invert_tricks(np.zeros((2, 4)), np.zeros((2, 5)), [rec])
    with pytest.raises(InvalidRecordError):
        TrickRecord(TrickKind.ROW_OUTLIER, mask=np.array([2, 1]), retained=np.zeros((2, 3)))
    with pytest.raises(InvalidRecordError):
        TrickRecord(TrickKind.ROW_OUTLIER, mask=np.array([1]), retained=np.zeros((2, 3)))


def test_flags_parse():
    assert TrickFlags.parse("cent,col-out") == TrickFlags()
    assert TrickFlags.parse("none") == TrickFlags.none()
    assert TrickFlags.parse("row-out,cent,col-out").to_string() == "cent,row-out,col-out"
    with pytest.raises(InvalidInputError):
        TrickFlags.parse("cent,bogus")


def test_row_outlier_trick_helps_on_planted_rows():
    wins = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((256, 64)).astype(np.float32)
        W[rng.choice(256, 1, replace=False)] *= 40
        X = rng.standard_normal((16, 256)).astype(np.float32)
        exact = X.astype(np.float64) @ W
        with_trick = quantize_layer(W, 3, TrickFlags(False, True, False), rng=seed)
        without = quantize_layer(W, 3, TrickFlags.none(), rng=seed)
        wins += rel_fro(estimate_mm(X, with_trick), exact) < rel_fro(estimate_mm(X, without), exact)
    assert wins >= 40


def test_centralization_helps_on_common_offset():
    wins = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        W = (rng.standard_normal((8, 8)) + 5 * rng.standard_normal(8)).astype(np.float32)
        with_trick = quantize_layer(W, 2, TrickFlags(True, False, False), rng=seed)
        without = quantize_layer(W, 2, TrickFlags.none(), rng=seed)
        wins += rel_fro(dequantize_layer(with_trick), W) <= rel_fro(dequantize_layer(without), W)
    assert wins >= 40
