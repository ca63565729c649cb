from __future__ import annotations

from typing import Sequence

import numpy as np

from pmmoe.errors import DimensionError, ParameterError

from .autograd import Tensor


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float) -> None:
    """``p <- p - lr * g`` for every trainable parameter.

    The update rebinds ``p.data`` to a fresh array, so snapshots holding the
    previous array are never mutated. Frozen parameters and ``None`` grads
    are skipped.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g is None or not p.requires_grad:
            continue
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter {p.name} {p.shape}")
        if lr == 0:
            continue
        p.data = p.data - lr * g
