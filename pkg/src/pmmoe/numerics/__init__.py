"""Dense float64 arithmetic, layers, reverse-mode gradients and SGD."""

from .autograd import Tensor, backward, grad
from .layers import MLP, Linear, orthogonal
from .ops import cross_entropy, logsumexp, matvec, softmax
from .optim import sgd_step

__all__ = [
    "Tensor",
    "backward",
    "grad",
    "MLP",
    "Linear",
    "orthogonal",
    "cross_entropy",
    "logsumexp",
    "matvec",
    "softmax",
    "sgd_step",
]
