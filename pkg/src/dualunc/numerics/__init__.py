"""Minimal numpy autodiff substrate: tensors, layers, optimizers, seeded RNG."""

from . import ops
from .optim import SGD, Adam, Optimizer, make_optimizer
from .random import ALGORITHM, derive_seed, make_rng, substream
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, no_grad, parameter

__all__ = [
    "ALGORITHM",
    "Adam",
    "DEFAULT_DTYPE",
    "Optimizer",
    "SGD",
    "Tensor",
    "as_tensor",
    "derive_seed",
    "make_optimizer",
    "make_rng",
    "no_grad",
    "ops",
    "parameter",
    "substream",
]
