"""Plain float64 array primitives (no gradient tracking)."""

from __future__ import annotations

import numpy as np

from pmmoe.errors import DimensionError, ParameterError


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matvec(w, x) -> np.ndarray:
    w, x = as_f64(w), as_f64(x)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: cannot apply weight of shape {w.shape} to vector of shape {x.shape}")
    return w @ x


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_f64(x)
    if x.size == 0:
        raise DimensionError("softmax of an empty vector")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def logsumexp(x, t: float = 1.0, axis: int | None = None):
    """Return ``t * log(sum(exp(x / t)))`` using a max shift.

    ``axis=None`` reduces over every element and returns a Python float.
    """
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    x = as_f64(x)
    if x.size == 0:
        raise DimensionError("logsumexp of an empty vector")
    z = x / t
    m = z.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    if axis is None:
        return float(t * out.reshape(()))
    return t * np.squeeze(out, axis=axis)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = as_f64(x)
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    logits = as_f64(logits)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a 1-d logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ParameterError(f"label {label} out of range for {logits.shape[0]} classes")
    # clamp -0.0 / tiny negatives from rounding
    return max(0.0, float(-log_softmax(logits)[label]))
