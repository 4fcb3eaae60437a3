"""Whole-network orchestration: calibrate, allocate, quantize, evaluate."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .allocator import BitAllocation, allocate_dp, budget_from_average, DEFAULT_CANDIDATES
from .calibration import FEW_SHOT_SAMPLES, ReferenceNet, compute_sensitivity, forward
from .errors import InvalidConfigError
from .rabitq_h import QuantizedLayer, estimate_mm, quantize_layer
from .transforms import TrickFlags


# bundled reference network: three tanh-separated layers, last one narrow
REFERENCE_WIDTHS = (64, 64, 64, 16)
REFERENCE_ROWS = 32
REFERENCE_EVAL_SAMPLES = 8


def reference_net(seed: int = 0, widths: Sequence[int] = REFERENCE_WIDTHS) -> ReferenceNet:
    return ReferenceNet.random(widths, seed)


def reference_data(
    seed: int = 0,
    d0: int = REFERENCE_WIDTHS[0],
    n_calib: int = FEW_SHOT_SAMPLES,
    n_eval: int = REFERENCE_EVAL_SAMPLES,
    rows: int = REFERENCE_ROWS,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Standard-normal calibration and evaluation batches (float32, as archived)."""
    rng = np.random.default_rng([seed, 1])
    calib = [rng.standard_normal((rows, d0)).astype(np.float32) for _ in range(n_calib)]
    evals = [rng.standard_normal((rows, d0)).astype(np.float32) for _ in range(n_eval)]
    return calib, evals


def layer_rng(seed: int, k: int) -> np.random.Generator:
    """Counter-based generator for layer ``k``; independent of scheduling order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))


def quantize_network(
    net: ReferenceNet,
    bits: Sequence[int],
    tricks: TrickFlags | None = None,
    seed: int = 0,
    threads: int | None = None,
) -> list[QuantizedLayer]:
    if len(bits) != len(net.weights):
        raise InvalidConfigError(f"allocation has {len(bits)} entries for {len(net.weights)} layers")
    labels = net.labels

    def work(k: int) -> QuantizedLayer:
        return quantize_layer(net.weights[k], bits[k], tricks, rng=layer_rng(seed, k), name=labels[k])

    threads = threads or os.cpu_count() or 1
    if threads == 1:
        return [work(k) for k in range(len(bits))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(len(bits))))


def quantized_output(net: ReferenceNet, layers: Sequence[QuantizedLayer], X) -> float:
    out, _ = forward(net, X, matmul=lambda k, Xk: estimate_mm(Xk, layers[k]))
    return out


def output_error(net: ReferenceNet, layers: Sequence[QuantizedLayer], samples: Sequence) -> float:
    """Mean absolute difference between full-precision and quantized outputs."""
    errs = [abs(quantized_output(net, layers, X) - forward(net, X)[0]) for X in samples]
    return float(np.mean(errs))


def layer_errors(net: ReferenceNet, layers: Sequence[QuantizedLayer], samples: Sequence) -> list[dict]:
    """Per-layer entrywise error of ``estimate_mm`` on full-precision activations."""
    per_layer: list[list[np.ndarray]] = [[] for _ in layers]
    exact_sq = np.zeros(len(layers))
    for X in samples:
        _, cache = forward(net, X)
        for k, layer in enumerate(layers):
            Xk = cache.inputs[k]
            exact = cache.outputs[k]
            diff = estimate_mm(Xk, layer).astype(np.float64) - exact
            per_layer[k].append(np.abs(diff).ravel())
            exact_sq[k] += float(np.sum(exact * exact))
    stats = []
    for k, layer in enumerate(layers):
        e = np.concatenate(per_layer[k])
        stats.append({
            "layer": layer.name,
            "bits": layer.bits,
            "relative_fro": float(np.sqrt(np.sum(e * e) / exact_sq[k])) if exact_sq[k] > 0 else 0.0,
            "q50": float(np.quantile(e, 0.5)),
            "q90": float(np.quantile(e, 0.9)),
            "q99": float(np.quantile(e, 0.99)),
            "max": float(e.max()),
        })
    return stats


def calibrate_and_allocate(
    net: ReferenceNet,
    samples: Sequence,
    average_bits: float,
    candidates: Sequence[int] = DEFAULT_CANDIDATES,
    mode: str = "few-shot",
) -> BitAllocation:
    profile = compute_sensitivity(net, samples, mode=mode).profile()
    return allocate_dp(profile, candidates, budget_from_average(profile, average_bits))
