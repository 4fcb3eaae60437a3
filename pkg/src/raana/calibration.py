"""Layer sensitivity estimation on a small reference network.

The reference network is a chain of linear layers ``H_k = X_k @ W_k`` with
``X_{k+1} = tanh(H_k)`` and scalar output ``f = sum(H_L)``.  For each layer
the sensitivity coefficient is

    alpha_k = mean_i  |df/dH_k|_F * |X_k|_F * |W_k|_F / sqrt(d_k)

over the calibration samples, which is what the bit allocator consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .allocator import SensitivityProfile
from .errors import InvalidConfigError, InvalidInputError

FEW_SHOT_SAMPLES = 5
ZERO_SHOT_ROWS = 100
# the calibration sentence used for language models; kept for adapters
ZERO_SHOT_SENTENCE = "The curious fox leaped over the quiet stream, its reflection rippling in the golden afternoon light."
ZERO_SHOT_REPEATS = 100


@dataclass
class ReferenceNet:
    weights: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if not self.weights:
            raise InvalidInputError("reference net needs at least one layer")
        self.weights = [np.asarray(W) for W in self.weights]
        for k, W in enumerate(self.weights):
            if W.ndim != 2 or not np.all(np.isfinite(W)):
                raise InvalidInputError(f"layer {k} weight must be a finite 2-D matrix")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise InvalidInputError(
                    f"layer {k} expects {W.shape[0]} inputs but layer {k - 1} produces {self.weights[k - 1].shape[1]}"
                )
        if self.activation not in ("tanh", "identity"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def labels(self) -> list[str]:
        return [f"layer{k}" for k in range(len(self.weights))]

    @classmethod
    def random(cls, widths: Sequence[int], seed: int = 0, scales: Sequence[float] | None = None) -> "ReferenceNet":
        """Gaussian weights with std ``scale_k / sqrt(d_k)``."""
        rng = np.random.default_rng(seed)
        scales = [1.0] * (len(widths) - 1) if scales is None else list(scales)
        if len(scales) != len(widths) - 1:
            raise InvalidInputError("need one scale per layer")
        weights = [
            (rng.standard_normal((d, c)) * (s / math.sqrt(d))).astype(np.float32)
            for d, c, s in zip(widths[:-1], widths[1:], scales)
        ]
        return cls(weights)

    def _act(self, H: np.ndarray) -> np.ndarray:
        return np.tanh(H) if self.activation == "tanh" else H

    def _act_grad(self, H: np.ndarray) -> np.ndarray:
        if self.activation == "tanh":
            t = np.tanh(H)
            return 1 - t * t
        return np.ones_like(H)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]


def _check_input(net: ReferenceNet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise InvalidInputError(f"input of shape {X.shape} does not match network input dimension {net.input_dim}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("input must be finite")
    return X


def forward(
    net: ReferenceNet,
    X,
    matmul: Callable[[int, np.ndarray], np.ndarray] | None = None,
) -> tuple[float, ForwardCache]:
    """Run the network in float64, caching every layer input and output.

    ``matmul(k, X_k)`` replaces the exact product ``X_k @ W_k``; the quantized
    forward pass uses it to plug in :func:`raana.rabitq_h.estimate_mm`.
    """
    X = _check_input(net, X)
    inputs, outputs = [], []
    for k, W in enumerate(net.weights):
        inputs.append(X)
        H = X @ W.astype(np.float64) if matmul is None else np.asarray(matmul(k, X), dtype=np.float64)
        outputs.append(H)
        if k + 1 < len(net.weights):
            X = net._act(H)
    return float(outputs[-1].sum()), ForwardCache(inputs, outputs)


def forward_from(net: ReferenceNet, k: int, H) -> float:
    """Output of the network when layer ``k`` produces ``H``."""
    H = np.asarray(H, dtype=np.float64)
    for W in net.weights[k + 1:]:
        H = net._act(H) @ W.astype(np.float64)
    return float(H.sum())


def backward_layer_grads(net: ReferenceNet, cache: ForwardCache) -> list[np.ndarray]:
    """``df/dH_k`` for every layer by reverse-mode differentiation."""
    grads = [None] * len(net.weights)
    G = np.ones_like(cache.outputs[-1])
    grads[-1] = G
    for k in range(len(net.weights) - 2, -1, -1):
        G = (G @ net.weights[k + 1].astype(np.float64).T) * net._act_grad(cache.outputs[k])
        grads[k] = G
    return grads


@dataclass
class CalibrationReport:
    labels: list[str]
    input_dims: list[int]
    sizes: list[int]
    weight_norms: list[float]
    grad_norms: list[list[float]]  # [sample][layer]
    input_norms: list[list[float]]  # [sample][layer]
    mode: str = "few-shot"
    alphas: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.alphas:
            self.alphas = alphas_from_components(self.input_dims, self.weight_norms, self.grad_norms, self.input_norms)

    @property
    def n_samples(self) -> int:
        return len(self.grad_norms)

    def profile(self) -> SensitivityProfile:
        return SensitivityProfile(list(self.labels), list(self.alphas), list(self.sizes))

    def verbose_text(self) -> str:
        lines = [f"# mode {self.mode} samples {self.n_samples}"]
        for k, lab in enumerate(self.labels):
            lines.append(
                f"# {lab} d={self.input_dims[k]} weight_norm={self.weight_norms[k]!r} "
                + " ".join(f"s{i}:grad={g[k]!r},input={x[k]!r}" for i, (g, x) in
                           enumerate(zip(self.grad_norms, self.input_norms)))
            )
        return "\n".join(lines) + "\n" + self.profile().to_text()


def alphas_from_components(input_dims, weight_norms, grad_norms, input_norms) -> list[float]:
    n = len(grad_norms)
    alphas = []
    for k, d in enumerate(input_dims):
        total = 0.0
        for i in range(n):
            total += grad_norms[i][k] * input_norms[i][k] * weight_norms[k] / math.sqrt(d)
        alphas.append(total / n)
    return alphas


def compute_sensitivity(net: ReferenceNet, samples: Sequence, mode: str = "few-shot") -> CalibrationReport:
    if len(samples) == 0:
        raise InvalidConfigError("calibration needs at least one sample")
    grad_norms, input_norms = [], []
    for X in samples:
        _, cache = forward(net, X)
        grads = backward_layer_grads(net, cache)
        grad_norms.append([float(np.linalg.norm(G)) for G in grads])
        input_norms.append([float(np.linalg.norm(Xk)) for Xk in cache.inputs])
    return CalibrationReport(
        labels=net.labels,
        input_dims=[W.shape[0] for W in net.weights],
        sizes=[W.shape[0] * W.shape[1] for W in net.weights],
        weight_norms=[float(np.linalg.norm(W.astype(np.float64))) for W in net.weights],
        grad_norms=grad_norms,
        input_norms=input_norms,
        mode=mode,
    )


def zero_shot_input(net: ReferenceNet, seed: int = 0, rows: int = ZERO_SHOT_ROWS) -> np.ndarray:
    """The single synthetic calibration input: a seeded standard-normal ``(rows, d_0)`` matrix."""
    return np.random.default_rng(seed).standard_normal((rows, net.input_dim))
