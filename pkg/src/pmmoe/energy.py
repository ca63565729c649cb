"""Energy-based scoring of foreign experts against the local one.

For an anchor representation ``h_j`` and a foreign one ``h_k`` the projected
vector is ``v = (h_k * h_j) / (|h_k| |h_j|)`` (elementwise product, so
``sum(v)`` is the cosine similarity). Each coordinate is an energy level
``-v[i]`` and the confidence is the negative free energy
``T * log(sum_i exp(v[i] / T))``. Experts with the lowest mean confidence
are dropped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pmmoe.errors import DimensionError, ParameterError
from pmmoe.numerics.ops import logsumexp


@dataclass(frozen=True)
class EnergyConfig:
    T: float = 1.0
    gamma: float = 0.2

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"temperature must be positive, got {self.T}")
        if not 0 <= self.gamma < 1:
            raise ParameterError(f"dropout ratio must be in [0, 1), got {self.gamma}")


@dataclass
class EnergyReport:
    anchor: int
    confidence: np.ndarray  # per pool entry; NaN at the anchor
    kept: np.ndarray  # bool per pool entry

    @property
    def removed(self) -> list[int]:
        return np.flatnonzero(~self.kept).tolist()

    @property
    def kept_count(self) -> int:
        return int(self.kept.sum())


def projected_vector(h_j, h_k) -> np.ndarray:
    """Row-wise ``h_k * h_j / (|h_k| |h_j|)``; rows with a zero norm come back as NaN."""
    h_j = np.asarray(h_j, dtype=np.float64)
    h_k = np.asarray(h_k, dtype=np.float64)
    if h_j.shape[-1] != h_k.shape[-1]:
        raise DimensionError(f"representations of shape {h_j.shape} and {h_k.shape} differ in width")
    norm = np.linalg.norm(h_j, axis=-1, keepdims=True) * np.linalg.norm(h_k, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, (h_k * h_j) / np.where(norm > 0, norm, 1.0), np.nan)


def confidence(h_j, h_k, T: float = 1.0):
    """Negative free energy of ``h_k`` relative to the anchor ``h_j``.

    Works on single vectors (returns a float) or on matching ``[n, D]``
    batches (returns ``[n]``). A zero-norm input scores ``-inf``.
    """
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    v = projected_vector(h_j, h_k)
    if v.ndim == 1:
        return -math.inf if np.isnan(v).any() else logsumexp(v, T)
    bad = np.isnan(v).any(axis=-1)
    out = np.full(v.shape[0], -np.inf)
    if (~bad).any():
        out[~bad] = logsumexp(v[~bad], T, axis=-1)
    return out


def removal_count(pool_size: int, gamma: float) -> int:
    return math.floor(gamma * (pool_size - 1))


def drop_lowest(scores: Sequence[float], anchor: int, gamma: float) -> np.ndarray:
    """Kept mask after removing the ``floor(gamma * (P - 1))`` lowest-scoring
    foreign entries; ``scores[anchor]`` is ignored and the anchor always stays.
    Ties are removed lowest index first."""
    scores = np.asarray(scores, dtype=np.float64)
    P = scores.size
    kept = np.ones(P, dtype=bool)
    foreign = [k for k in range(P) if k != anchor]
    ranked = sorted(foreign, key=lambda k: (scores[k], k))
    for k in ranked[: removal_count(P, gamma)]:
        kept[k] = False
    return kept


def mean_confidences(reps: Sequence[np.ndarray], anchor: int, T: float) -> np.ndarray:
    """Average confidence of every pool entry over a batch.

    ``reps[l]`` is expert ``l``'s output on the batch, ``[n, D]`` (a ``[D]``
    vector stands for an input-independent parameter). Samples whose anchor
    representation is zero carry no direction and are skipped.
    """
    reps = [np.atleast_2d(np.asarray(r, dtype=np.float64)) for r in reps]
    h_j = reps[anchor]
    usable = np.linalg.norm(h_j, axis=-1) > 0
    out = np.full(len(reps), np.nan)
    for k, h_k in enumerate(reps):
        if k == anchor:
            continue
        if not usable.any():
            out[k] = -np.inf
            continue
        hj, hk = np.broadcast_arrays(h_j, h_k)
        out[k] = float(np.mean(confidence(hj[usable], hk[usable], T)))
    return out


def denoise(reps: Sequence[np.ndarray], anchor: int, cfg: EnergyConfig) -> EnergyReport:
    scores = mean_confidences(reps, anchor, cfg.T)
    return EnergyReport(anchor, scores, drop_lowest(scores, anchor, cfg.gamma))


def write_reports_csv(path, reports: Sequence[tuple[int, EnergyReport]]) -> None:
    """Rows ``client_id, expert_id, confidence, kept``; the anchor's confidence is blank."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "expert_id", "confidence", "kept"])
        for client_id, rep in reports:
            for k, (score, keep) in enumerate(zip(rep.confidence, rep.kept)):
                w.writerow([client_id, k, "" if np.isnan(score) else repr(float(score)), int(keep)])
