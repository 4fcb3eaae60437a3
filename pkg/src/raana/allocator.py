"""Per-layer bit allocation.

Minimizes ``sum_k alpha_k * 2**-b_k`` subject to ``sum_k b_k * m_k <= R``
with every ``b_k`` drawn from a candidate set.  Dividing all ``m_k`` and
``R`` by their GCD shrinks the budget axis, after which a dynamic program
over (layer, consumed budget) finds the global optimum.

Ties between allocations with equal objective go to the smaller consumed
budget, then to the lexicographically smallest ``(b_1, ..., b_L)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleBudgetError, InstanceTooLargeError, InvalidConfigError

DEFAULT_CANDIDATES = tuple(range(1, 9))
BRUTEFORCE_LIMIT = 10**7


@dataclass
class SensitivityProfile:
    labels: list[str]
    alphas: list[float]
    sizes: list[int]

    def __post_init__(self):
        if not (len(self.labels) == len(self.alphas) == len(self.sizes)):
            raise InvalidConfigError("labels, alphas and sizes must have equal length")
        if not self.labels:
            raise InvalidConfigError("profile has no layers")
        self.alphas = [float(a) for a in self.alphas]
        self.sizes = [int(m) for m in self.sizes]
        for label, a, m in zip(self.labels, self.alphas, self.sizes):
            if not math.isfinite(a) or a < 0:
                raise InvalidConfigError(f"layer {label!r}: alpha must be finite and non-negative, got {a}")
            if m < 1:
                raise InvalidConfigError(f"layer {label!r}: parameter count must be positive, got {m}")
            if not label or any(ch.isspace() for ch in label):
                raise InvalidConfigError(f"layer label {label!r} must be non-empty without whitespace")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_arrays(cls, alphas: Sequence[float], sizes: Sequence[int], labels: Sequence[str] | None = None):
        labels = list(labels) if labels is not None else [f"layer{k}" for k in range(len(alphas))]
        return cls(labels, list(alphas), list(sizes))

    def to_text(self) -> str:
        return "".join(f"{lab} {m} {a!r}\n" for lab, m, a in zip(self.labels, self.sizes, self.alphas))

    @classmethod
    def from_text(cls, text: str) -> "SensitivityProfile":
        """Parse ``label m_k alpha_k`` lines; blank lines and ``#`` comments are skipped."""
        labels, sizes, alphas = [], [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise InvalidConfigError(f"profile line {lineno}: expected 'label m_k alpha_k', got {line!r}")
            try:
                sizes.append(int(parts[1]))
                alphas.append(float(parts[2]))
            except ValueError as exc:
                raise InvalidConfigError(f"profile line {lineno}: {exc}") from None
            labels.append(parts[0])
        return cls(labels, alphas, sizes)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SensitivityProfile":
        return cls.from_text(Path(path).read_text())


@dataclass
class BitAllocation:
    bits: list[int]
    objective: float
    consumed: int
    budget: int
    gcd: int
    labels: list[str] = field(default_factory=list)

    @property
    def reduced_budget(self) -> int:
        return self.budget // self.gcd

    def as_dict(self) -> dict:
        return {
            "bits": list(self.bits),
            "labels": list(self.labels),
            "objective": self.objective,
            "consumed": self.consumed,
            "budget": self.budget,
            "gcd": self.gcd,
            "reduced_budget": self.reduced_budget,
        }


@dataclass
class DPStats:
    """Number of candidate relaxations performed by :func:`allocate_dp`."""

    cell_updates: int = 0


def reduce_by_gcd(sizes: Sequence[int], budget: int) -> tuple[list[int], int, int]:
    if any(m < 1 for m in sizes) or budget < 0:
        raise InvalidConfigError("sizes must be positive and the budget non-negative")
    g = math.gcd(*sizes, budget)
    return [m // g for m in sizes], budget // g, g


def objective(profile: SensitivityProfile, bits: Sequence[int]) -> float:
    """``sum_k alpha_k 2**-b_k``, accumulated from the last layer backwards.

    The summation order matches the dynamic program, so both solvers report
    bit-identical values for the same allocation.
    """
    if len(bits) != len(profile):
        raise InvalidConfigError(f"allocation has {len(bits)} entries for {len(profile)} layers")
    total = 0.0
    for a, b in zip(reversed(profile.alphas), reversed(bits)):
        total = math.ldexp(a, -b) + total
    return total


def _check_candidates(candidates: Iterable[int]) -> list[int]:
    cands = sorted(set(int(b) for b in candidates))
    if not cands:
        raise InvalidConfigError("candidate bit-width set is empty")
    if cands[0] < 1:
        raise InvalidConfigError(f"candidate bit-widths must be >= 1, got {cands[0]}")
    return cands


def _check_feasible(profile: SensitivityProfile, cands: list[int], budget: int) -> None:
    minimal = cands[0] * sum(profile.sizes)
    if budget < minimal:
        raise InfeasibleBudgetError(budget, minimal)


def _result(profile, bits, budget, g) -> BitAllocation:
    consumed = sum(b * m for b, m in zip(bits, profile.sizes))
    if consumed > budget:
        # cannot happen while g divides every m_k; kept as a hard guard
        raise AssertionError(f"allocation consumes {consumed} bits, budget is {budget}")
    return BitAllocation(list(bits), objective(profile, bits), consumed, budget, g, list(profile.labels))


def allocate_dp(
    profile: SensitivityProfile,
    candidates: Iterable[int] = DEFAULT_CANDIDATES,
    budget: int = 0,
    use_gcd: bool = True,
    stats: DPStats | None = None,
) -> BitAllocation:
    """Optimal allocation by dynamic programming over the reduced budget.

    Layers are processed last to first: ``best[k][r]`` is the smallest
    objective of layers ``k..L`` consuming exactly ``r`` reduced units.
    Candidates are tried in ascending order and only strict improvements
    replace a cell, so each cell keeps the lexicographically smallest suffix.
    """
    cands = _check_candidates(candidates)
    budget = int(budget)
    _check_feasible(profile, cands, budget)
    if use_gcd:
        sizes, cap, g = reduce_by_gcd(profile.sizes, budget)
    else:
        sizes, cap, g = list(profile.sizes), budget, 1
    L = len(profile)

    # cost of b bits at layer k in reduced units; exact because g divides m_k
    costs = [[math.floor(m * b + 0.5) for b in cands] for m in sizes]
    terms = [[math.ldexp(a, -b) for b in cands] for a in profile.alphas]

    best = np.full(cap + 1, np.inf)
    best[0] = 0.0
    choice = np.full((L, cap + 1), -1, dtype=np.int16)
    for k in range(L - 1, -1, -1):
        nxt = np.full(cap + 1, np.inf)
        for j in range(len(cands)):
            r = costs[k][j]
            if r > cap:
                continue
            cand = terms[k][j] + best[: cap + 1 - r]
            if stats is not None:
                stats.cell_updates += cand.size
            target = nxt[r:]
            improve = cand < target
            target[improve] = cand[improve]
            choice[k, r:][improve] = j
        best = nxt

    if not np.isfinite(best).any():
        raise InfeasibleBudgetError(budget, cands[0] * sum(profile.sizes))
    # argmin returns the first minimum, i.e. the smallest consumed budget
    r = int(np.argmin(best))
    bits = []
    for k in range(L):
        j = int(choice[k, r])
        bits.append(cands[j])
        r -= costs[k][j]
    return _result(profile, bits, budget, g)


def allocate_bruteforce(
    profile: SensitivityProfile,
    candidates: Iterable[int] = DEFAULT_CANDIDATES,
    budget: int = 0,
    limit: int = BRUTEFORCE_LIMIT,
) -> BitAllocation:
    """Exhaustive search with the same cost model and tie-breaking as :func:`allocate_dp`."""
    cands = _check_candidates(candidates)
    budget = int(budget)
    if len(cands) ** len(profile) > limit:
        raise InstanceTooLargeError(f"{len(cands)}^{len(profile)} allocations exceed the enumeration limit {limit}")
    _check_feasible(profile, cands, budget)
    _, _, g = reduce_by_gcd(profile.sizes, budget)
    best_key = None
    for bits in itertools.product(cands, repeat=len(profile)):
        consumed = sum(b * m for b, m in zip(bits, profile.sizes))
        if consumed > budget:
            continue
        key = (objective(profile, bits), consumed, bits)
        if best_key is None or key < best_key:
            best_key = key
    return _result(profile, list(best_key[2]), budget, g)


def uniform_allocation(profile: SensitivityProfile, bits: int) -> BitAllocation:
    budget = bits * sum(profile.sizes)
    return _result(profile, [bits] * len(profile), budget, math.gcd(*profile.sizes, budget))


def budget_from_average(profile: SensitivityProfile, average_bits: float) -> int:
    """Total budget ``floor(avg * sum m_k)`` rounded down to a multiple of ``gcd(m_k)``."""
    if not math.isfinite(average_bits) or average_bits <= 0:
        raise InvalidConfigError(f"average bit budget must be positive, got {average_bits}")
    total = sum(profile.sizes)
    raw = math.floor(round(average_bits * total, 6))
    g = math.gcd(*profile.sizes)
    return raw - raw % g


def format_report(allocation: BitAllocation) -> str:
    lines = [
        f"objective = {allocation.objective!r}",
        f"budget = {allocation.budget}",
        f"consumed = {allocation.consumed}",
        f"gcd = {allocation.gcd}",
        f"reduced_budget = {allocation.reduced_budget}",
    ]
    labels = allocation.labels or [f"layer{k}" for k in range(len(allocation.bits))]
    lines += [f"bits[{lab}] = {b}" for lab, b in zip(labels, allocation.bits)]
    return "\n".join(lines) + "\n"
