"""Parameter update rules and learning-rate schedules."""

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter
from .config import OptimizerConfig, OptimizerName, ScheduleConfig, ScheduleKind
from .errors import CheckpointError, ShapeError


@dataclass
class OptimizerState:
    """Step counter, current learning rate and Adam moments keyed by parameter name."""

    step: int = 0
    lr: float = 0.01
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_lr(lr: float) -> None:
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")


def _check_grad(name: str, param: Parameter, grad: np.ndarray) -> None:
    if grad.shape != param.shape:
        raise ShapeError(
            f"Gradient for '{name}' has shape {list(grad.shape)}, expected {list(param.shape)}"
        )


def sgd_step(
    params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], lr: float
) -> None:
    """p <- p - lr·g for every trainable parameter with a gradient."""
    _check_lr(lr)
    for name, param in params.items():
        if not param.trainable or name not in grads:
            continue
        grad = np.asarray(grads[name])
        _check_grad(name, param, grad)
        param.assign(param.data - param.dtype.type(lr) * grad)


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """One bias-corrected Adam update; mutates ``state`` and returns it."""
    _check_lr(lr)
    state.step += 1
    state.lr = lr
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t

    for name, param in params.items():
        if not param.trainable or name not in grads:
            continue
        grad = np.asarray(grads[name], dtype=param.dtype)
        _check_grad(name, param, grad)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=param.dtype)
            v = np.zeros(param.shape, dtype=param.dtype)
        m = (beta1 * m + (1.0 - beta1) * grad).astype(param.dtype)
        v = (beta2 * v + (1.0 - beta2) * grad * grad).astype(param.dtype)
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        param.assign(param.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype))
    return state


def step_decay(epoch: int, base: float = 0.01, drop: float = 0.1, every: int = 100) -> float:
    """base·drop^floor(epoch/every)."""
    if epoch < 0:
        raise ValueError(f"Epoch must be non-negative, got {epoch}")
    # One rounding: 0.01 / 10**3 == 1e-05 whereas 0.01 * 0.1**3 is not
    drops = epoch // every
    if drop == 0.1:
        return base / 10.0**drops
    return base * drop**drops


def learning_rate(schedule: ScheduleConfig, base: float, epoch: int) -> float:
    """Learning rate for ``epoch`` under ``schedule``."""
    if schedule.kind == ScheduleKind.CONSTANT:
        return base
    return step_decay(epoch, base, schedule.drop, schedule.every)


class Optimizer:
    """Named-parameter optimizer holding its own state."""

    def __init__(self, params: Mapping[str, Parameter], config: OptimizerConfig) -> None:
        self.params = dict(params)
        self.config = config
        self.state = OptimizerState(lr=config.lr)

    def set_epoch(self, epoch: int) -> float:
        self.state.lr = learning_rate(self.config.schedule, self.config.lr, epoch)
        return self.state.lr

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items() if p.trainable}

    def step(self) -> None:
        raise NotImplementedError

    def export_state(self) -> dict[str, np.ndarray]:
        """Flat arrays for the checkpoint container."""
        state = {
            "optim.step": np.asarray(self.state.step, dtype=np.int64),
            "optim.lr": np.asarray(self.state.lr, dtype=np.float64),
        }
        state.update({f"optim.m.{k}": v.copy() for k, v in self.state.m.items()})
        state.update({f"optim.v.{k}": v.copy() for k, v in self.state.v.items()})
        return state

    def import_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Restore state written by :meth:`export_state`.

        Raises:
            CheckpointError: If moments refer to unknown parameters or mismatch in shape.
        """
        if "optim.step" not in arrays or "optim.lr" not in arrays:
            raise CheckpointError("Optimizer state is missing step or learning rate")
        state = OptimizerState(step=int(arrays["optim.step"]), lr=float(arrays["optim.lr"]))
        for key, value in arrays.items():
            for prefix, target in (("optim.m.", state.m), ("optim.v.", state.v)):
                if not key.startswith(prefix):
                    continue
                name = key.removeprefix(prefix)
                param = self.params.get(name)
                if param is None or param.shape != value.shape:
                    raise CheckpointError(f"Optimizer moment '{key}' does not match the model")
                target[name] = np.array(value, dtype=param.dtype)
        self.state = state


class SGD(Optimizer):
    def step(self) -> None:
        sgd_step(self.params, self.grads(), self.state.lr)
        self.state.step += 1


class Adam(Optimizer):
    def step(self) -> None:
        adam_step(
            self.params,
            self.grads(),
            self.state,
            self.state.lr,
            beta1=self.config.beta1,
            beta2=self.config.beta2,
            eps=self.config.eps,
        )


def create_optimizer(params: Mapping[str, Parameter], config: OptimizerConfig) -> Optimizer:
    """Create an optimizer from configuration."""
    if config.name == OptimizerName.SGD:
        return SGD(params, config)
    return Adam(params, config)
