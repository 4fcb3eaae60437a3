"""Command-line pipeline: reference -> calibrate -> allocate -> quantize -> eval.

Every subcommand prints a JSON run report (inputs, seed, versions, timings)
to stdout.  Exit codes: 0 success, 2 configuration error, 3 infeasible
budget, 4 corrupt input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import DEFAULT_CANDIDATES, SensitivityProfile, allocate_dp, budget_from_average
from .calibration import FEW_SHOT_SAMPLES, ReferenceNet, compute_sensitivity, forward, zero_shot_input
from .container import ARCHIVE_MAGIC, MODEL_MAGIC, load_archive, read_model, save_archive, write_model
from .errors import (
    CorruptDataError,
    InfeasibleBudgetError,
    InvalidConfigError,
    RaanaError,
    UnsupportedFormatError,
)
from .pipeline import (
    REFERENCE_EVAL_SAMPLES,
    REFERENCE_ROWS,
    REFERENCE_WIDTHS,
    layer_errors,
    quantize_network,
    quantized_output,
    reference_data,
    reference_net,
)
from .transforms import TrickFlags

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_CORRUPT = 4

ALLOCATION_KIND = "raana-allocation"
PROFILE_HEADER = "# raana sensitivity profile"
WEIGHT_PREFIX = "weight."
CALIB_PREFIX = "calib."
EVAL_PREFIX = "eval."


# ---------------------------------------------------------------- helpers


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"raana": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _sniff(path) -> str:
    try:
        head = Path(path).read_bytes()[:4]
    except OSError as exc:
        raise InvalidConfigError(f"cannot read {path}: {exc.strerror}") from None
    if head == ARCHIVE_MAGIC:
        return "archive"
    if head == MODEL_MAGIC:
        return "model"
    if head[:1] == b"{":
        return "json"
    return "text"


def _expect(path, kind: str, stage: str) -> None:
    found = _sniff(path)
    if found != kind:
        names = {"archive": "tensor archive", "model": "quantized model file", "json": "allocation report",
                 "text": "sensitivity profile"}
        raise InvalidConfigError(f"{stage} needs the {names[kind]}, but {path} is a {names[found]}; check the stage order")


def _prefixed(tensors: dict, prefix: str) -> list[np.ndarray]:
    names = sorted((n for n in tensors if n.startswith(prefix) and n[len(prefix):].isdigit()),
                   key=lambda n: int(n[len(prefix):]))
    return [tensors[n] for n in names]


def load_net(path) -> ReferenceNet:
    _expect(path, "archive", "network input")
    tensors, meta = load_archive(path)
    weights = _prefixed(tensors, WEIGHT_PREFIX)
    if not weights:
        raise InvalidConfigError(f"{path} holds no '{WEIGHT_PREFIX}<k>' tensors")
    try:
        return ReferenceNet(weights, activation=meta.get("activation", "tanh"))
    except RaanaError as exc:
        raise InvalidConfigError(f"{path}: {exc}") from None


def load_samples(path, prefix: str) -> list[np.ndarray]:
    _expect(path, "archive", "sample input")
    tensors, _ = load_archive(path)
    samples = _prefixed(tensors, prefix)
    if not samples:
        raise InvalidConfigError(f"{path} holds no '{prefix}<i>' tensors")
    return samples


def parse_candidates(text: str) -> list[int]:
    """``"1-8"`` or ``"2,3,4"`` (ranges and lists may be mixed)."""
    out = []
    try:
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise InvalidConfigError(f"cannot parse candidate bit-widths {text!r}") from None
    if not out:
        raise InvalidConfigError("candidate bit-width set is empty")
    return sorted(set(out))


def _emit(report: dict) -> None:
    print(json.dumps(report, indent=2, sort_keys=True))


# ---------------------------------------------------------------- subcommands


def cmd_reference(args) -> dict:
    widths = [int(w) for w in args.widths.split(",")] if args.widths else list(REFERENCE_WIDTHS)
    net = reference_net(args.seed, widths)
    calib, evals = reference_data(args.seed, widths[0], args.calib_samples, args.eval_samples, args.rows)
    save_archive(args.out_model, {f"{WEIGHT_PREFIX}{k}": W for k, W in enumerate(net.weights)},
                 {"activation": net.activation, "widths": widths, "seed": args.seed})
    tensors = {f"{CALIB_PREFIX}{i}": X for i, X in enumerate(calib)}
    tensors.update({f"{EVAL_PREFIX}{i}": X for i, X in enumerate(evals)})
    save_archive(args.out_data, tensors, {"seed": args.seed, "rows": args.rows})
    return {"outputs": {"model": str(args.out_model), "data": str(args.out_data)}, "widths": widths}


def cmd_calibrate(args) -> dict:
    net = load_net(args.model)
    inputs = {"model": {"path": str(args.model), "sha256": _sha256(args.model)}}
    if args.zero_shot:
        samples, mode = [zero_shot_input(net, args.seed)], "zero-shot"
    else:
        if not args.samples:
            raise InvalidConfigError("calibrate needs --samples ARCHIVE or --zero-shot")
        samples, mode = load_samples(args.samples, args.prefix)[: args.num_samples], "few-shot"
        inputs["samples"] = {"path": str(args.samples), "sha256": _sha256(args.samples)}
    report = compute_sensitivity(net, samples, mode=mode)
    header = f"{PROFILE_HEADER} mode={mode} samples={report.n_samples}\n"
    Path(args.out).write_text(header + report.profile().to_text())
    if args.verbose_report:
        Path(args.verbose_report).write_text(report.verbose_text())
    return {"inputs": inputs, "mode": mode, "samples": report.n_samples, "output": str(args.out),
            "alphas": dict(zip(report.labels, report.alphas))}


def _profile_summary(text: str) -> dict:
    for line in text.splitlines():
        if line.startswith(PROFILE_HEADER):
            fields = dict(tok.split("=", 1) for tok in line[len(PROFILE_HEADER):].split() if "=" in tok)
            return {"mode": fields.get("mode"), "samples": int(fields["samples"]) if "samples" in fields else None}
    return {"mode": None, "samples": None}


def cmd_allocate(args) -> dict:
    _expect(args.profile, "text", "allocate")
    text = Path(args.profile).read_text()
    profile = SensitivityProfile.from_text(text)
    cands = parse_candidates(args.candidates)
    budget = budget_from_average(profile, args.bits_budget_avg)
    alloc = allocate_dp(profile, cands, budget)
    doc = {
        "kind": ALLOCATION_KIND,
        "average_bits": args.bits_budget_avg,
        "candidates": cands,
        **alloc.as_dict(),
        "profile": {"labels": profile.labels, "sizes": profile.sizes, "alphas": profile.alphas,
                    **_profile_summary(text)},
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"inputs": {"profile": {"path": str(args.profile), "sha256": _sha256(args.profile)}},
            "output": str(args.out), "allocation": alloc.as_dict()}


def load_allocation(path) -> dict:
    _expect(path, "json", "quantize")
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("kind") != ALLOCATION_KIND or "bits" not in doc:
        raise InvalidConfigError(f"{path} is not an allocation report produced by 'allocate'")
    return doc


def cmd_quantize(args) -> dict:
    net = load_net(args.model)
    doc = load_allocation(args.allocation)
    bits = [int(b) for b in doc["bits"]]
    if len(bits) != len(net.weights):
        raise InvalidConfigError(f"allocation covers {len(bits)} layers but the model has {len(net.weights)}")
    sizes = [W.size for W in net.weights]
    if doc.get("profile", {}).get("sizes", sizes) != sizes:
        raise InvalidConfigError("allocation was computed for layers of different sizes than this model")
    tricks = TrickFlags.parse(args.tricks)
    t0 = time.perf_counter()
    layers = quantize_network(net, bits, tricks, seed=args.seed, threads=args.threads)
    elapsed = time.perf_counter() - t0
    metadata = {
        "seed": args.seed,
        "tricks": tricks.to_string(),
        "allocation": {k: doc[k] for k in ("bits", "objective", "consumed", "budget", "gcd", "average_bits") if k in doc},
        "calibration": doc.get("profile", {}),
    }
    size = write_model(layers, metadata, args.out)
    return {"inputs": {"model": {"path": str(args.model), "sha256": _sha256(args.model)},
                       "allocation": {"path": str(args.allocation), "sha256": _sha256(args.allocation)}},
            "output": str(args.out), "bytes": size, "bits": bits, "tricks": tricks.to_string(),
            "quantize_seconds": elapsed}


def cmd_eval(args) -> dict:
    net = load_net(args.model)
    _expect(args.quantized, "model", "eval")
    layers, metadata = read_model(args.quantized)
    if [(L.d, L.c) for L in layers] != [W.shape for W in net.weights]:
        raise InvalidConfigError("quantized model does not match the network's layer shapes")
    samples = load_samples(args.inputs, args.prefix)
    t0 = time.perf_counter()
    per_sample = []
    for X in samples:
        exact, _ = forward(net, X)
        approx = quantized_output(net, layers, X)
        per_sample.append({"exact": exact, "quantized": approx, "abs_error": abs(approx - exact)})
    layer_stats = layer_errors(net, layers, samples)
    elapsed = time.perf_counter() - t0
    report = {
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in (("model", args.model), ("quantized", args.quantized), ("data", args.inputs))},
        "seed": metadata.get("seed"),
        "allocation": metadata.get("allocation"),
        "tricks": metadata.get("tricks"),
        "output_error": {
            "mean_abs": float(np.mean([s["abs_error"] for s in per_sample])),
            "max_abs": float(np.max([s["abs_error"] for s in per_sample])),
            "per_sample": per_sample,
        },
        "layers": layer_stats,
        "eval_seconds": elapsed,
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raana", description="Randomized-Hadamard low-bit weight quantization pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reference", help="write the bundled reference net and its sample data")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--widths", default="", help=f"comma list, default {','.join(map(str, REFERENCE_WIDTHS))}")
    p.add_argument("--calib-samples", type=int, default=FEW_SHOT_SAMPLES)
    p.add_argument("--eval-samples", type=int, default=REFERENCE_EVAL_SAMPLES)
    p.add_argument("--rows", type=int, default=REFERENCE_ROWS)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("calibrate", help="compute layer sensitivities")
    p.add_argument("model")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--samples", help="tensor archive with calibration batches")
    group.add_argument("--zero-shot", action="store_true", help="use one seeded synthetic input instead")
    p.add_argument("--prefix", default=CALIB_PREFIX)
    p.add_argument("--num-samples", type=int, default=FEW_SHOT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose-report", help="also write per-sample norm components here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("allocate", help="choose per-layer bit-widths")
    p.add_argument("profile")
    p.add_argument("--bits-budget-avg", type=float, required=True)
    p.add_argument("--candidates", default=f"{DEFAULT_CANDIDATES[0]}-{DEFAULT_CANDIDATES[-1]}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("quantize", help="quantize every layer and write the model file")
    p.add_argument("model")
    p.add_argument("allocation")
    p.add_argument("--tricks", default=TrickFlags().to_string(), help="cent,col-out[,row-out] or none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="compare quantized and full-precision outputs")
    p.add_argument("model")
    p.add_argument("quantized")
    p.add_argument("--inputs", required=True, help="tensor archive with evaluation batches")
    p.add_argument("--prefix", default=EVAL_PREFIX)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
            raise InvalidConfigError("--threads must be at least 1")
        result = args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"raana: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CorruptDataError, UnsupportedFormatError) as exc:
        print(f"raana: corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except RaanaError as exc:
        print(f"raana: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"raana: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = {"command": args.command, "seed": getattr(args, "seed", None), "versions": _versions(),
              "seconds": time.perf_counter() - t0, **result}
    _emit(report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
