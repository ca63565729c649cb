from __future__ import annotations

from typing import Sequence

import numpy as np

from pmmoe.errors import DimensionError, ParameterError

from . import autograd as ag
from .autograd import Tensor

ACTIVATIONS = ("none", "relu", "leaky_relu", "softmax")
INITS = ("uniform", "orthogonal", "zeros")

DEFAULT_LEAKY_SLOPE = 0.01


def orthogonal(rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Orthogonal matrix via QR of a Gaussian draw, sign-corrected so the
    distribution is uniform over the orthogonal group."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Linear:
    """Affine map ``act(W x + b)`` with ``W`` of shape ``[out, in]``."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator | None = None,
        activation: str = "none",
        slope: float = DEFAULT_LEAKY_SLOPE,
        init: str = "uniform",
        name: str = "linear",
    ):
        if n_in < 1 or n_out < 1:
            raise DimensionError(f"linear layer needs positive sizes, got {n_in}->{n_out}")
        if activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {activation!r}")
        if init not in INITS:
            raise ParameterError(f"unknown init {init!r}")
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.slope = slope
        if init == "zeros":
            w = np.zeros((n_out, n_in))
            b = np.zeros(n_out)
        else:
            if rng is None:
                raise ParameterError("random init needs an rng")
            bound = 1.0 / np.sqrt(n_in)
            if init == "orthogonal":
                w = orthogonal(n_out, n_in, rng)
                b = np.zeros(n_out)
            else:
                w = rng.uniform(-bound, bound, size=(n_out, n_in))
                b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(b, requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.linear(x, self.weight, self.bias)
        if self.activation == "relu":
            return ag.relu(y)
        if self.activation == "leaky_relu":
            return ag.leaky_relu(y, self.slope)
        if self.activation == "softmax":
            return ag.masked_softmax(y)
        return y

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Stack of :class:`Linear` layers; the last layer gets ``out_activation``."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        activation: str = "relu",
        out_activation: str = "none",
        slope: float = DEFAULT_LEAKY_SLOPE,
        init: str = "uniform",
        name: str = "mlp",
    ):
        if len(sizes) < 2:
            raise DimensionError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        n = len(sizes) - 1
        self.layers = [
            Linear(
                sizes[i],
                sizes[i + 1],
                rng,
                activation=activation if i < n - 1 else out_activation,
                slope=slope,
                init=init,
                name=f"{name}.{i}",
            )
            for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
