"""Helpers shared by the test modules."""

import numpy as np

from probact.autodiff import Parameter, Variable, mul, sum_all
from probact.tensor import Tensor


def leaf(array, name: str = "x") -> Variable:
    """64-bit leaf that requires gradients."""
    return Variable(Tensor(array, dtype=np.float64), requires_grad=True, name=name)


def param(array, name: str = "p") -> Parameter:
    return Parameter(Tensor(array, dtype=np.float64), name=name)


def away_from_zero(rng, shape, margin: float = 0.1) -> np.ndarray:
    """Random values with |v| >= margin so kinks stay out of finite-difference reach."""
    values = rng.uniform(margin, 1.5, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


def weighted_sum(out: Variable, weights: np.ndarray) -> Variable:
    """Scalar objective with non-uniform upstream gradient."""
    return sum_all(mul(out, Variable(Tensor(weights, dtype=out.dtype))))
