"""Central finite-difference validation of analytic gradients."""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import structlog

from .autodiff import Variable, trace
from .errors import NumericError, ShapeError, UsageError
from .tensor import Tensor

logger = structlog.get_logger()

DEFAULT_STEPS = (1e-4, 1e-5, 1e-6)


@dataclass
class ElementCheck:
    """Worst element of one checked variable."""

    name: str
    max_relative_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked_elements: int
    passed: bool


@dataclass
class GradCheckReport:
    """Per-variable outcome of a finite-difference check."""

    checks: list[ElementCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_relative_error(self) -> float:
        return max((c.max_relative_error for c in self.checks), default=0.0)

    def __getitem__(self, name: str) -> ElementCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)


def relative_error(analytic: float, numeric: float) -> float:
    """|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _scalar(output: Variable) -> float:
    if output.value.size != 1:
        raise ShapeError(
            f"Function under test must return a scalar, got shape {list(output.shape)}"
        )
    return float(output.data.reshape(()))


def _set(variable: Variable, array: np.ndarray) -> None:
    variable.value = Tensor(array, dtype=variable.dtype)


def finite_diff_check(
    fn: Callable[[], Variable],
    variables: Sequence[Variable],
    h: float | Sequence[float] = 1e-5,
    tolerance: float = 1e-4,
    *,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` takes no arguments and must be deterministic: any stochastic unit
    inside it has to draw from a fixed NoiseKey schedule so that every
    re-evaluation replays the same noise. When ``h`` is a sequence the best
    match over the steps is kept for each element.

    Args:
        fn: Builds the scalar objective from the current variable values.
        variables: Leaves to check (parameters or inputs), all 64-bit.
        h: Step size or sweep of step sizes.
        tolerance: Pass threshold on the maximum relative error.
        max_elements: Check a random sample of at most this many elements per
            variable (all elements when None).
        seed: Seed of that sample.

    Raises:
        UsageError: If a variable is not 64-bit or does not require gradients.
        NumericError: If a non-finite value shows up, with its element index.
    """
    steps = (float(h),) if isinstance(h, int | float) else tuple(float(s) for s in h)
    for var in variables:
        if var.dtype != np.float64:
            raise UsageError(f"Gradient checks need 64-bit values, '{var.name}' is {var.dtype}")
        if not var.requires_grad:
            raise UsageError(f"Variable '{var.name}' does not require gradients")

    output, tape = trace(fn)
    _scalar(output)
    leaf_grads = tape.backward(output)

    rng = np.random.default_rng(seed)
    checks: list[ElementCheck] = []
    for position, var in enumerate(variables):
        name = var.name or f"variable{position}"
        analytic = leaf_grads.get(var, np.zeros(var.shape, dtype=var.dtype))
        if not np.isfinite(analytic).all():
            index = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            raise NumericError(f"Non-finite analytic gradient for '{name}'", index=index)

        indices = list(np.ndindex(var.shape))
        if max_elements is not None and len(indices) > max_elements:
            chosen = rng.choice(len(indices), size=max_elements, replace=False)
            indices = [indices[i] for i in sorted(chosen)]

        base = var.value.numpy()
        worst = ElementCheck(name, 0.0, (), 0.0, 0.0, len(indices), True)
        try:
            for index in indices:
                best_error, best_numeric = math.inf, math.nan
                for step in steps:
                    shifted = base.copy()
                    shifted[index] += step
                    _set(var, shifted)
                    f_plus = _scalar(fn())
                    shifted[index] = base[index] - step
                    _set(var, shifted)
                    f_minus = _scalar(fn())
                    numeric = (f_plus - f_minus) / (2.0 * step)
                    if not math.isfinite(numeric):
                        raise NumericError(
                            f"Non-finite central difference for '{name}'", index=index
                        )
                    error = relative_error(float(analytic[index]), numeric)
                    if error < best_error:
                        best_error, best_numeric = error, numeric
                if best_error >= worst.max_relative_error:
                    worst.max_relative_error = best_error
                    worst.worst_index = index
                    worst.analytic = float(analytic[index])
                    worst.numeric = best_numeric
        finally:
            _set(var, base)

        worst.passed = worst.max_relative_error < tolerance
        checks.append(worst)
        logger.debug(
            "Gradient checked",
            variable=name,
            max_relative_error=worst.max_relative_error,
            elements=len(indices),
        )

    return GradCheckReport(checks=checks, tolerance=tolerance)
