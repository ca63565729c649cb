"""Accuracy of a gated mixture of independent experts.

Each of ``M`` experts is correct with probability ``p``, independently. The
gate sends a sample to one expert, favouring every correct expert with
relative weight ``1 + alpha`` over an incorrect one. With ``s`` correct
experts the mixture is right with probability ``(1 + alpha) s / (M + alpha s)``.
Averaging over ``s ~ Binomial(M, p)`` gives the exact accuracy; Jensen's
inequality on that convex function of ``s`` gives the closed-form bound
``(1 + alpha) p / (1 + alpha (p + (1 - p) / M))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from pmmoe.errors import ParameterError

MAX_EXACT_M = 30
CHUNK = 100_000


@dataclass(frozen=True)
class TheoremParams:
    M: int
    p: float
    alpha: float

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise ParameterError(f"need at least two experts, got M={self.M}")
        if not 0 < self.p <= 1:
            raise ParameterError(f"expert accuracy must be in (0, 1], got p={self.p}")
        if not self.alpha >= 0:
            raise ParameterError(f"gate advantage must be non-negative, got alpha={self.alpha}")


def _params(params) -> TheoremParams:
    return params if isinstance(params, TheoremParams) else TheoremParams(*params)


def success_probability(s, M: int, alpha: float):
    """Chance the gate lands on a correct expert when ``s`` of ``M`` are correct."""
    s = np.asarray(s, dtype=np.float64)
    return (1.0 + alpha) * s / (M + alpha * s)


def bound(params) -> float:
    t = _params(params)
    return (1.0 + t.alpha) * t.p / (1.0 + t.alpha * (t.p + (1.0 - t.p) / t.M))


def exact_pmpe(params) -> float:
    """Exact accuracy by summing over the number of correct experts."""
    t = _params(params)
    if t.M > MAX_EXACT_M:
        raise ParameterError(f"exact enumeration supports M <= {MAX_EXACT_M}; use monte_carlo_pmpe for M={t.M}")
    total = 0.0
    for s in range(t.M + 1):
        weight = math.comb(t.M, s) * t.p**s * (1.0 - t.p) ** (t.M - s)
        total += weight * float(success_probability(s, t.M, t.alpha))
    return total


def monte_carlo_pmpe(params, trials: int, seed: int = 0) -> tuple[float, float]:
    """Simulated accuracy and its binomial standard error.

    Trials run in fixed-size chunks, each with its own generator seeded by
    ``(seed, chunk)``, so the estimate depends only on ``trials`` and ``seed``.
    """
    t = _params(params)
    if trials < 1:
        raise ParameterError(f"need at least one trial, got {trials}")
    hits = 0
    for chunk, start in enumerate(range(0, trials, CHUNK)):
        n = min(CHUNK, trials - start)
        rng = np.random.default_rng([seed, chunk])
        s = (rng.random((n, t.M)) < t.p).sum(axis=1)
        hits += int((rng.random(n) < success_probability(s, t.M, t.alpha)).sum())
    est = hits / trials
    return est, math.sqrt(est * (1.0 - est) / trials)


@dataclass
class BoundCheck:
    M: int
    p: float
    alpha: float
    bound: float
    exact: float
    mc_estimate: float
    mc_se: float

    @property
    def exact_ok(self) -> bool:
        if self.p < 1 and self.alpha > 0:
            return self.exact > self.bound
        return self.exact >= self.bound - 1e-12

    @property
    def mc_ok(self) -> bool:
        return self.mc_estimate >= self.bound - 3.0 * self.mc_se

    @property
    def passed(self) -> bool:
        return self.exact_ok and self.mc_ok


@dataclass
class BoundReport:
    checks: list[BoundCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[str]:
        out = []
        for c in self.checks:
            if not c.exact_ok:
                out.append(f"(M={c.M}, p={c.p}, alpha={c.alpha}): exact {c.exact:.6f} below bound {c.bound:.6f}")
            if not c.mc_ok:
                out.append(
                    f"(M={c.M}, p={c.p}, alpha={c.alpha}): simulated {c.mc_estimate:.6f} "
                    f"more than 3 SE below bound {c.bound:.6f}"
                )
        return out


def verify_bound(grid: Iterable, trials: int = 100_000, seed: int = 0) -> BoundReport:
    points = [_params(g) for g in grid]
    if not points:
        raise ParameterError("empty parameter grid")
    checks = []
    for i, t in enumerate(points):
        est, se = monte_carlo_pmpe(t, trials, seed + i)
        checks.append(BoundCheck(t.M, t.p, t.alpha, bound(t), exact_pmpe(t), est, se))
    return BoundReport(checks)


def write_report_csv(path, report: BoundReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "p", "alpha", "bound", "exact", "mc_estimate", "mc_se", "pass"])
        for c in report.checks:
            w.writerow([c.M, repr(c.p), repr(c.alpha), repr(c.bound), repr(c.exact),
                        repr(c.mc_estimate), repr(c.mc_se), int(c.passed)])


DEFAULT_GRID: Sequence[tuple[int, float, float]] = ((2, 0.5, 1.0), (5, 0.6, 1.0), (10, 0.6, 2.0), (20, 0.8, 5.0))
