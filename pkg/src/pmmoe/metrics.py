"""Weighted accuracy across clients."""

from __future__ import annotations

from typing import Sequence

from pmmoe.errors import ParameterError


def a_total(pairs: Sequence[tuple[int, float]]) -> float:
    """Sample-weighted accuracy ``sum_j (N_j / N) * A_j``."""
    if not pairs:
        raise ParameterError("a_total of no clients")
    total = sum(n for n, _ in pairs)
    if any(n <= 0 for n, _ in pairs):
        raise ParameterError("client sample counts must be positive")
    if any(not 0 <= a <= 1 for _, a in pairs):
        raise ParameterError("accuracies must lie in [0, 1]")
    return float(sum((n / total) * a for n, a in pairs))
