"""Layers: parameter-owning wrappers around the functional operations."""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .activations import NoiseRecord, bounded_sigma, probact
from .autodiff import Parameter, Variable
from .config import (
    ActivationConfig,
    ActivationKind,
    EvalMode,
    ProbActConfig,
    ProbActMode,
    SigmaGranularity,
)
from .errors import CheckpointError
from .tensor import Fill, NoiseKey, Xavier, create


@dataclass(frozen=True)
class ForwardContext:
    """Per-call settings shared by every layer of one forward pass.

    ``step`` and ``draw_id`` address the noise: together with a site's layer
    id and the noise seed they form the NoiseKey of that site's draw.
    """

    training: bool = True
    step: int = 0
    noise_seed: int = 0
    draw_id: int = 0
    eval_mode: EvalMode | None = None

    def key(self, layer_id: int) -> NoiseKey:
        return NoiseKey(layer_id, self.step, self.draw_id, self.noise_seed)


class Layer(ABC):
    """Base class for network layers."""

    kind: str = "layer"

    def __init__(self) -> None:
        self.params: dict[str, Parameter] = {}

    @abstractmethod
    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        """Apply the layer."""
        ...

    def __call__(self, x: Variable, ctx: ForwardContext) -> Variable:
        return self.forward(x, ctx)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state saved with the model."""
        return {}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise CheckpointError(f"Layer '{self.kind}' has no buffer '{name}'")

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}={list(p.shape)}" for k, p in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Dense(Layer):
    kind = "dense"

    def __init__(
        self, in_features: int, out_features: int, seed: int | tuple[int, ...], dtype: np.dtype
    ) -> None:
        super().__init__()
        self.params["weight"] = Parameter(
            create((in_features, out_features), Xavier(seed), dtype), name="weight"
        )
        self.params["bias"] = Parameter(create(out_features, Fill(0.0), dtype), name="bias")

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.dense(x, self.params["weight"], self.params["bias"])


class Conv2d(Layer):
    kind = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        seed: int | tuple[int, ...],
        dtype: np.dtype,
        kernel_size: int = 3,
        padding: int = 1,
    ) -> None:
        super().__init__()
        self.padding = padding
        self.params["weight"] = Parameter(
            create((out_channels, in_channels, kernel_size, kernel_size), Xavier(seed), dtype),
            name="weight",
        )
        self.params["bias"] = Parameter(create(out_channels, Fill(0.0), dtype), name="bias")

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.conv2d(x, self.params["weight"], self.params["bias"], padding=self.padding)


class MaxPool2d(Layer):
    kind = "pool"

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.maxpool2d(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.flatten(x)


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, channels: int, dtype: np.dtype) -> None:
        super().__init__()
        self.params["gamma"] = Parameter(create(channels, Fill(1.0), dtype), name="gamma")
        self.params["beta"] = Parameter(create(channels, Fill(0.0), dtype), name="beta")
        self.running = F.RunningStats.zeros(channels, np.dtype(dtype))

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.batch_norm(
            x, self.params["gamma"], self.params["beta"], self.running, training=ctx.training
        )

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running.mean, "running_var": self.running.var}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        current = self.buffers().get(name)
        if current is None:
            super().load_buffer(name, value)
        if value.shape != current.shape:
            raise CheckpointError(
                f"Buffer '{name}' has shape {list(value.shape)}, expected {list(current.shape)}"
            )
        setattr(self.running, name.removeprefix("running_"), value.astype(current.dtype))


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float, layer_id: int) -> None:
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"Dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.layer_id = layer_id

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.dropout(x, self.p, ctx.training, ctx.key(self.layer_id))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.relu(x)


class LeakyReLU(Layer):
    kind = "leaky"

    def __init__(self, slope: float = F.LEAKY_SLOPE) -> None:
        super().__init__()
        self.slope = slope

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.leaky_relu(x, self.slope)


class PReLU(Layer):
    kind = "prelu"

    def __init__(self, channels: int, init: float, dtype: np.dtype) -> None:
        super().__init__()
        self.params["slope"] = Parameter(create(channels, Fill(init), dtype), name="slope")

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.prelu(x, self.params["slope"])


class Swish(Layer):
    kind = "swish"

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        return F.swish(x)


class ProbActLayer(Layer):
    """One ProbAct site.

    ``site_shape`` is the activation-map shape of one sample (C×H×W or F).
    Element-wise modes own one parameter per element of that map, or one per
    channel with channel granularity; single mode uses the model-wide shared
    scalar passed in as ``shared_sigma``.
    """

    kind = "probact"

    def __init__(
        self,
        config: ProbActConfig,
        site_shape: tuple[int, ...],
        layer_id: int,
        seed: int | tuple[int, ...],
        dtype: np.dtype,
        shared_sigma: Parameter | None = None,
    ) -> None:
        super().__init__()
        self.config = config
        self.site_shape = tuple(site_shape)
        self.layer_id = layer_id
        self.last_record: NoiseRecord | None = None
        self.shared = shared_sigma

        if config.mode == ProbActMode.SINGLE:
            if shared_sigma is None:
                raise ValueError("Single-sigma ProbAct needs the shared sigma parameter")
        elif config.elementwise:
            elements = math.prod(self.site_shape)
            if config.granularity == SigmaGranularity.CHANNEL:
                shape = (self.site_shape[0],) + (1,) * (len(self.site_shape) - 1)
            else:
                shape = self.site_shape
            name = "k" if config.mode == ProbActMode.BOUNDED else "sigma"
            self.params[name] = Parameter(
                create(shape, Xavier(seed, fan_in=elements, fan_out=elements), dtype), name=name
            )

    @property
    def parameter(self) -> Parameter | None:
        """The raw trainable value (sigma or k) this site reads, if any."""
        if self.shared is not None:
            return self.shared
        return next(iter(self.params.values()), None)

    def sigma(self) -> np.ndarray:
        """Effective sigma of this site (raw k mapped through the bound)."""
        param = self.parameter
        if param is None:
            return np.asarray(self.config.sigma)
        if self.config.mode == ProbActMode.BOUNDED:
            return bounded_sigma(param.data, self.config.alpha, self.config.beta).data
        return param.data

    def forward(self, x: Variable, ctx: ForwardContext) -> Variable:
        out, record = probact(
            x,
            self.config,
            self.parameter,
            ctx.key(self.layer_id),
            training=ctx.training,
            eval_mode=ctx.eval_mode,
        )
        self.last_record = record
        return out


def create_activation(
    config: ActivationConfig,
    site_shape: tuple[int, ...],
    layer_id: int,
    seed: int | tuple[int, ...],
    dtype: np.dtype,
    shared_sigma: Parameter | None = None,
) -> Layer:
    """Create the activation layer for one site."""
    if config.kind == ActivationKind.RELU:
        return ReLU()
    if config.kind == ActivationKind.LEAKY:
        return LeakyReLU(config.leaky_slope)
    if config.kind == ActivationKind.PRELU:
        return PReLU(site_shape[0], config.prelu_init, dtype)
    if config.kind == ActivationKind.SWISH:
        return Swish()
    return ProbActLayer(config.probact, site_shape, layer_id, seed, dtype, shared_sigma)
