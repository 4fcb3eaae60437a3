"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Monte-Carlo seeds are fixed constants chosen before any run; the outcome
is reported as measured.
"""

import math
import time

import numpy as np
import pytest

from raana.allocator import allocate_bruteforce, allocate_dp, budget_from_average, reduce_by_gcd, SensitivityProfile
from raana.calibration import ReferenceNet, backward_layer_grads, compute_sensitivity, forward, forward_from, zero_shot_input
from raana.container import model_from_bytes, model_to_bytes
from raana.hadamard import RotationRecord, fwht, practical_rht
from raana.pipeline import output_error, quantize_network, reference_data, reference_net
from raana.rabitq_h import dequantize_layer, estimate_mm, quantize_layer
from raana.transforms import TrickFlags, apply_tricks, invert_tricks

from oracles import dense_practical_rht, finite_difference_grad, inner_product_trials

C_ERR = 5.75
DIMS = (64, 256, 1024)
BITS = range(1, 9)
TAIL_TRIALS = 100_000
BIAS_TRIALS = 1_000_000


def unit(d, b):
    return 1.0 / (math.sqrt(d) * 2**b)


@pytest.fixture(scope="module")
def tail_grid():
    """Signed errors for every (d, b) cell of the inner-product grid."""
    t0 = time.perf_counter()
    errors = {(d, b): inner_product_trials(d, b, TAIL_TRIALS, seed=10 * d + b) for d in DIMS for b in BITS}
    return errors, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_01_error_tail(tail_grid, criterion):
    errors, seconds = tail_grid
    rates = {cell: float(np.mean(np.abs(e) <= C_ERR * unit(*cell))) for cell, e in errors.items()}
    worst = min(rates, key=rates.get)
    ok = all(r >= 0.995 for r in rates.values()) and seconds <= 300
    failing = ", ".join(f"(d={d},b={b}):{r:.5f}" for (d, b), r in sorted(rates.items()) if r < 0.995) or "none"
    criterion(1, ok, f"worst cell d={worst[0]} b={worst[1]} rate={rates[worst]:.5f}; below 0.995: {failing}; "
                     f"{TAIL_TRIALS} trials/cell in {seconds:.0f}s")


@pytest.mark.slow
def test_criterion_02_error_scaling(tail_grid, criterion):
    errors, _ = tail_grid
    rows = [(1.0, b, math.log(d), math.log(np.sqrt(np.mean(e**2)))) for (d, b), e in errors.items()]
    A = np.array([r[:3] for r in rows])
    y = np.array([r[3] for r in rows])
    _, slope_b, slope_d = np.linalg.lstsq(A, y, rcond=None)[0]
    ok_b = abs(slope_b + math.log(2)) <= 0.10 * math.log(2)
    ok_d = abs(slope_d + 0.5) <= 0.15 * 0.5
    criterion(2, ok_b and ok_d, f"slope vs b {slope_b:.4f} (target {-math.log(2):.4f} +-10%), "
                                f"slope vs log d {slope_d:.4f} (target -0.5 +-15%)")


@pytest.mark.slow
def test_criterion_03_bias(criterion):
    d, b = 256, 4
    e = inner_product_trials(d, b, BIAS_TRIALS, seed=3)
    bias = abs(float(e.mean())) / unit(d, b)
    se = float(e.std()) / math.sqrt(e.size) / unit(d, b)
    criterion(3, bias <= 5e-3, f"|mean error| = {bias:.2e} units (limit 5e-3, standard error {se:.1e}) "
                               f"over {BIAS_TRIALS} trials")


def test_criterion_04_dp_exactness(criterion):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        L = int(rng.integers(1, 7))
        cands = sorted(rng.choice(np.arange(1, 9), size=int(rng.integers(1, 5)), replace=False).tolist())
        g = int(rng.integers(1, 20))
        reduced = rng.integers(1, 5, size=L)
        prof = SensitivityProfile.from_arrays(rng.exponential(1.0, L), (reduced * g).tolist())
        lo = cands[0] * int(reduced.sum())
        budget = g * int(rng.integers(lo, max(lo, min(64, cands[-1] * int(reduced.sum()))) + 1))
        dp, bf = allocate_dp(prof, cands, budget), allocate_bruteforce(prof, cands, budget)
        mismatches += (dp.objective, dp.bits) != (bf.objective, bf.bits)
    hand = allocate_dp(SensitivityProfile.from_arrays([4, 1], [1, 1]), [1, 2, 3], 4)
    ok = mismatches == 0 and hand.bits == [3, 1] and hand.objective == 1.0
    criterion(4, ok, f"{mismatches}/100 objective mismatches; hand instance bits={hand.bits} objective={hand.objective}")


def test_criterion_05_gcd(criterion):
    sizes, reduced, g = reduce_by_gcd([8, 12], 40)
    prof = SensitivityProfile.from_arrays([3.0, 1.0], [8, 12])
    a = allocate_dp(prof, range(1, 9), 40)
    b = allocate_dp(prof, range(1, 9), 40, use_gcd=False)
    same = (a.bits, a.objective, a.consumed) == (b.bits, b.objective, b.consumed)
    ok = (g, reduced, sizes) == (4, 10, [2, 3]) and same
    criterion(5, ok, f"g={g} R'={reduced} m'={sizes}; reduced and unreduced DP identical: {same}")


def test_criterion_06_transforms(criterion):
    rng = np.random.default_rng(6)
    inv = max(float(np.max(np.abs(fwht(fwht(x)) - x)))
              for x in (rng.standard_normal(d).astype(np.float32) for d in (2, 64, 1024, 8192)))
    ip = 0.0
    for d in (6, 100, 1000, 11008):
        rec = RotationRecord.random(d, rng)
        x, y = rng.standard_normal((2, d)).astype(np.float32)
        dev = abs(float(practical_rht(x, rec) @ practical_rht(y, rec)) - float(x @ y))
        ip = max(ip, dev / (np.linalg.norm(x) * np.linalg.norm(y)))
    dense = 0.0
    for d in range(1, 65):
        rec = RotationRecord.random(d, rng)
        X = rng.standard_normal((d, 3))
        M = dense_practical_rht(d, rec.signs_front, rec.signs_back)
        dense = max(dense, float(np.max(np.abs(practical_rht(X, rec, axis=0) - M @ X))))
    ok = inv <= 1e-5 and ip <= 1e-5 and dense <= 1e-10
    criterion(6, ok, f"involution {inv:.1e} (<=1e-5), inner products {ip:.1e} (<=1e-5), dense oracle {dense:.1e} (<=1e-10)")


def test_criterion_07_estimator_identity(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(50):
        d, c, n = (int(v) for v in rng.integers(2, 48, size=3))
        W = rng.standard_normal((d, c)) * rng.uniform(0.1, 10) + rng.normal()
        X = rng.standard_normal((n, d))
        for b in BITS:
            for tricks in (TrickFlags.none(), TrickFlags(True, True, True)):
                layer = quantize_layer(W, b, tricks, rng=1000 * i + b)
                ref = X @ dequantize_layer(layer).astype(np.float64)
                worst = max(worst, float(np.linalg.norm(estimate_mm(X, layer) - ref) / np.linalg.norm(ref)))
    criterion(7, worst <= 1e-5, f"max relative Frobenius deviation {worst:.2e} over 800 layer/bit/trick cases")


def test_criterion_08_trick_exactness(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for c_on in (False, True):
        for r_on in (False, True):
            for k_on in (False, True):
                W = rng.standard_normal((500, 300)) * 2 + rng.standard_normal(300)
                W[rng.integers(500)] *= 30
                X = rng.standard_normal((12, 500))
                Wm, records = apply_tricks(W, TrickFlags(c_on, r_on, k_on))
                Y = invert_tricks(X @ Wm, X, records)  # lossless quantizer stub
                worst = max(worst, float(np.linalg.norm(Y - X @ W) / np.linalg.norm(X @ W)))
    criterion(8, worst <= 1e-10, f"max relative Frobenius error {worst:.1e} over all 8 trick combinations (64-bit)")


def test_criterion_09_gradients(criterion):
    worst = 0.0
    for widths in ([64, 64], [64, 64, 64], [64, 64, 64, 64], [64, 64, 64, 64, 64]):
        net = ReferenceNet.random(widths, seed=len(widths))
        X = np.random.default_rng(9).standard_normal((2, widths[0]))
        _, cache = forward(net, X)
        for k, G in enumerate(backward_layer_grads(net, cache)):
            fd = finite_difference_grad(lambda H: forward_from(net, k, H), cache.outputs[k])
            worst = max(worst, float(np.max(np.abs(G - fd) / np.maximum(np.abs(fd), 1e-4))))
    alpha = compute_sensitivity(ReferenceNet([np.ones((4, 1))]), [np.ones((1, 4))]).alphas[0]
    criterion(9, worst <= 1e-4 and alpha == 2.0, f"max relative gradient deviation {worst:.1e}; hand example alpha={alpha!r}")


def _allocated_vs_uniform(seed, avg):
    net = reference_net(seed)
    calib, evals = reference_data(seed)
    prof = compute_sensitivity(net, calib).profile()
    alloc = allocate_dp(prof, range(1, 9), budget_from_average(prof, avg))
    uniform = [avg] * len(net.weights)
    e_alloc = output_error(net, quantize_network(net, alloc.bits, TrickFlags(), seed=seed, threads=1), evals)
    e_unif = output_error(net, quantize_network(net, uniform, TrickFlags(), seed=seed, threads=1), evals)
    return e_alloc, e_unif, alloc.bits != uniform


def test_criterion_10_allocation_vs_uniform(criterion):
    parts, ok = [], True
    for avg in (2, 3):
        results = [_allocated_vs_uniform(seed, avg) for seed in range(50)]
        wins = sum(a <= u for a, u, _ in results)
        differ = sum(dif for _, _, dif in results)
        ok &= wins >= 40
        parts.append(f"avg {avg}: {wins}/50 seeds <= uniform (allocation differs from uniform on {differ}/50)")
    criterion(10, ok, "; ".join(parts))


def test_criterion_11_storage(criterion):
    d = c = 512
    W = np.random.default_rng(11).standard_normal((d, c))
    layer = quantize_layer(W, 3, TrickFlags.none(), rng=11)
    data = model_to_bytes([layer], {})
    overhead = 8 * len(data) / (d * c) - 3
    limit = (d + 16 * c) / (d * c) + 0.01
    back, meta = model_from_bytes(data)
    identical = model_to_bytes(back, meta) == data and back[0] == layer
    with_tricks = 8 * len(model_to_bytes([quantize_layer(W, 3, TrickFlags(), rng=11)], {})) / (d * c) - 3
    criterion(11, overhead <= limit and identical,
              f"overhead {overhead:.5f} bits/param (limit {limit:.5f}); byte-identical round trip: {identical}; "
              f"with default tricks {with_tricks:.5f}")


def test_criterion_12_zero_shot_vs_few_shot(criterion):
    ratios = []
    for avg in (2, 3):
        for seed in range(20):
            net = reference_net(seed)
            calib, evals = reference_data(seed)
            errs = []
            for samples, mode in ((calib, "few-shot"), ([zero_shot_input(net, seed)], "zero-shot")):
                prof = compute_sensitivity(net, samples, mode=mode).profile()
                alloc = allocate_dp(prof, range(1, 9), budget_from_average(prof, avg))
                errs.append(output_error(net, quantize_network(net, alloc.bits, TrickFlags(), seed=seed, threads=1), evals))
            ratios.append(errs[1] / errs[0])
    lo, hi = min(ratios), max(ratios)
    criterion(12, 0.5 <= lo and hi <= 2.0, f"zero-shot/few-shot error ratio in [{lo:.3f}, {hi:.3f}] over 20 seeds x avg 2,3")
