"""The ProbAct stochastic activation.

ProbAct computes ``max(0, x) + sigma * eps`` with ``eps ~ N(0, 1)`` drawn from
the counter-based sampler. Depending on the configured mode, sigma is a
constant, a single trainable scalar shared by every site, one trainable value
per activation element, or the bounded reparameterization
``alpha * sigmoid(beta * k)`` of a trainable ``k``.

The exact ``eps`` of every forward pass is kept in a :class:`NoiseRecord`, so
the backward pass differentiates a deterministic function of x and sigma.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import Function, Parameter, Variable, unbroadcast
from .config import EvalMode, ProbActConfig, ProbActMode
from .errors import ShapeError, UsageError
from .tensor import NoiseKey, Tensor, sample_standard_normal


def bounded_sigma(k: Tensor | np.ndarray, alpha: float = 2.0, beta: float = 5.0) -> Tensor:
    """alpha·sigmoid(beta·k), kept strictly inside (0, alpha).

    Saturated values are nudged one representable step inside the interval.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"alpha and beta must be positive, got alpha={alpha}, beta={beta}")
    k = np.asarray(k)
    dtype = k.dtype if np.issubdtype(k.dtype, np.floating) else np.dtype(np.float64)
    sigma = dtype.type(alpha) * expit(dtype.type(beta) * k.astype(dtype))
    upper = np.nextafter(dtype.type(alpha), dtype.type(0))
    return Tensor.wrap(np.clip(sigma, np.finfo(dtype).tiny, upper).astype(dtype))


def bounded_sigma_slope(k: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """d sigma / d k = alpha·beta·s·(1 - s) with s = sigmoid(beta·k)."""
    s = expit(beta * k)
    return (alpha * beta * s * (1 - s)).astype(k.dtype)


@dataclass(frozen=True)
class NoiseRecord:
    """Everything the backward pass needs from one ProbAct forward call.

    ``epsilon`` is exactly the noise added in the forward pass (the mean of
    the draws in mc mode, zeros in mean mode).
    """

    epsilon: np.ndarray
    positive: np.ndarray
    mode: ProbActMode
    key: NoiseKey | None = None
    param: np.ndarray | None = None
    param_shape: tuple[int, ...] = ()
    draws: int = 1
    alpha: float = 2.0
    beta: float = 5.0


def _resolve_sigma(
    config: ProbActConfig, source: Parameter | Tensor | np.ndarray | float | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Effective sigma and the raw parameter it came from."""
    if config.mode == ProbActMode.FIXED:
        value = config.sigma if source is None else source
        return np.asarray(getattr(value, "data", value)), None
    if source is None:
        raise UsageError(f"ProbAct mode '{config.mode.value}' needs a sigma parameter")
    raw = np.asarray(getattr(source, "data", source))
    if config.mode == ProbActMode.BOUNDED:
        return bounded_sigma(raw, config.alpha, config.beta).data, raw
    return raw, raw


def _draws(eval_mode: EvalMode, training: bool) -> int:
    if training or eval_mode.kind == "stochastic":
        return 1
    if eval_mode.kind == "mean":
        return 0
    return eval_mode.samples


def probact_forward(
    x: Tensor | np.ndarray,
    config: ProbActConfig,
    sigma_source: Parameter | Tensor | np.ndarray | float | None,
    key: NoiseKey,
    *,
    training: bool = True,
    eval_mode: EvalMode | None = None,
) -> tuple[Tensor, NoiseRecord]:
    """Apply ProbAct to ``x``.

    Training always takes a single draw. Outside training, ``eval_mode`` (or
    the config's) picks one draw, no noise, or the average of n draws taken
    at consecutive draw ids starting from ``key.draw_id``.

    Raises:
        ShapeError: If sigma does not broadcast to the shape of ``x``.
        UsageError: If a trainable mode gets no sigma parameter.
    """
    x = np.asarray(getattr(x, "data", x))
    sigma, raw = _resolve_sigma(config, sigma_source)
    try:
        if np.broadcast_shapes(sigma.shape, x.shape) != x.shape:
            raise ValueError
    except ValueError as e:
        raise ShapeError(
            f"Sigma shape {list(sigma.shape)} does not fit activation map {list(x.shape)}"
        ) from e

    positive = x > 0
    mean = np.where(positive, x, x.dtype.type(0))
    draws = _draws(eval_mode or config.eval_mode, training)

    if draws == 0:
        epsilon = np.zeros(x.shape, dtype=x.dtype)
        out = mean
    else:
        epsilon = sample_standard_normal(x.shape, key, dtype=x.dtype).data
        for d in range(1, draws):
            epsilon = epsilon + sample_standard_normal(
                x.shape, key.with_draw(key.draw_id + d), dtype=x.dtype
            ).data
        if draws > 1:
            epsilon = epsilon / x.dtype.type(draws)
        out = mean + sigma.astype(x.dtype) * epsilon

    record = NoiseRecord(
        epsilon=epsilon,
        positive=positive,
        mode=config.mode,
        key=key if draws else None,
        param=raw,
        param_shape=raw.shape if raw is not None else (),
        draws=draws,
        alpha=config.alpha,
        beta=config.beta,
    )
    return Tensor.wrap(out), record


def probact_backward(
    upstream: Tensor | np.ndarray, record: NoiseRecord, config: ProbActConfig
) -> tuple[Tensor, Tensor | None]:
    """Gradients of ProbAct with respect to x and its parameter.

    The parameter gradient is reduced to the parameter's shape: summed over
    every element for the single shared sigma, per element (or channel) for
    element-wise modes, chained through the sigmoid bound for bounded mode.
    Fixed mode has no parameter and returns None.

    Raises:
        UsageError: If the record came from a differently configured call.
        ShapeError: If the upstream gradient does not match the record.
    """
    if record.mode != config.mode:
        raise UsageError(
            f"Noise record from mode '{record.mode.value}' used with '{config.mode.value}'"
        )
    if config.mode == ProbActMode.BOUNDED and (record.alpha, record.beta) != (
        config.alpha,
        config.beta,
    ):
        raise UsageError("Noise record bounds differ from the configured alpha and beta")
    upstream = np.asarray(getattr(upstream, "data", upstream))
    epsilon = np.asarray(record.epsilon)
    if upstream.shape != epsilon.shape:
        raise ShapeError(
            f"Upstream gradient {list(upstream.shape)} does not match record "
            f"{list(record.epsilon.shape)}"
        )

    grad_x = np.where(record.positive, upstream, upstream.dtype.type(0))
    if config.mode == ProbActMode.FIXED:
        return Tensor.wrap(grad_x), None

    grad_sigma = upstream * epsilon
    if config.mode == ProbActMode.SINGLE:
        grad_param = np.asarray(grad_sigma.sum(), dtype=upstream.dtype).reshape(record.param_shape)
    else:
        grad_param = unbroadcast(grad_sigma, record.param_shape)
        if config.mode == ProbActMode.BOUNDED:
            grad_param = grad_param * bounded_sigma_slope(
                np.asarray(record.param, dtype=upstream.dtype), config.alpha, config.beta
            )
    return Tensor.wrap(grad_x), Tensor.wrap(np.asarray(grad_param, dtype=upstream.dtype))


class ProbAct(Function):
    """Tape operation; inputs are (x,) in fixed mode, (x, sigma-or-k) otherwise."""

    name = "probact"

    @staticmethod
    def forward(saved, x, *param, config, key, training, eval_mode):
        source = param[0] if param else None
        out, record = probact_forward(
            x, config, source, key, training=training, eval_mode=eval_mode
        )
        saved["record"], saved["config"] = record, config
        saved["has_param"] = bool(param)
        return out.data

    @staticmethod
    def backward(saved, grad):
        grad_x, grad_param = probact_backward(grad, saved["record"], saved["config"])
        if saved["has_param"]:
            return grad_x.data, grad_param.data
        return (grad_x.data,)


def probact(
    x: Variable,
    config: ProbActConfig,
    sigma: Variable | None,
    key: NoiseKey,
    *,
    training: bool = True,
    eval_mode: EvalMode | None = None,
) -> tuple[Variable, NoiseRecord]:
    """Differentiable ProbAct; returns the output and its noise record."""
    inputs = (x,) if config.mode == ProbActMode.FIXED or sigma is None else (x, sigma)
    out, saved = ProbAct.apply_with_context(
        *inputs, config=config, key=key, training=training, eval_mode=eval_mode
    )
    return out, saved["record"]
