"""Central finite differences, used as the independent gradient oracle."""

import numpy as np

STEP = 1e-5
REL_TOL = 1e-4


def numeric_grad(loss_fn, tensor, step=STEP):
    """d loss / d tensor.data by central differences; ``loss_fn`` returns a float."""
    g = np.zeros_like(tensor.data)
    base = tensor.data
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += step
        tensor.data = plus
        up = loss_fn()
        minus = base.copy()
        minus[idx] -= step
        tensor.data = minus
        down = loss_fn()
        g[idx] = (up - down) / (2 * step)
    tensor.data = base
    return g


def rel_error(analytic, numeric):
    """Max elementwise error scaled by the gradient magnitude of the tensor."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
