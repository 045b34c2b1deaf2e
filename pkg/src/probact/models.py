"""Sequential networks materialized from a ModelSpec."""

import math
from collections.abc import Iterator

import numpy as np
import structlog

from .autodiff import Parameter, Variable
from .config import ActivationConfig, ActivationKind, ModelSpec, ProbActMode
from .errors import CheckpointError, ShapeError
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    ForwardContext,
    Layer,
    MaxPool2d,
    ProbActLayer,
    create_activation,
)
from .tensor import Fill, Tensor, create, default_dtype

logger = structlog.get_logger()

SHARED_SIGMA_NAME = "probact.sigma"


class Model:
    """An ordered stack of layers with named parameters and buffers."""

    def __init__(
        self,
        layers: list[Layer],
        spec: ModelSpec,
        activation: ActivationConfig,
        num_classes: int,
        input_shape: tuple[int, ...],
        dtype: np.dtype,
        dropout_p: float | None = None,
        shared_sigma: Parameter | None = None,
    ) -> None:
        self.layers = layers
        self.spec = spec
        self.activation = activation
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.dropout_p = dropout_p
        self.shared_sigma = shared_sigma

    def __call__(self, x: Variable | Tensor | np.ndarray, ctx: ForwardContext) -> Variable:
        return self.forward(x, ctx)

    def forward(self, x: Variable | Tensor | np.ndarray, ctx: ForwardContext) -> Variable:
        """Logits for a batch of N×(input_shape) inputs."""
        if not isinstance(x, Variable):
            x = Variable(Tensor(x, dtype=self.dtype))
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"Input shape {list(x.shape[1:])} does not match model input "
                f"{list(self.input_shape)}"
            )
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    def _layer_names(self) -> Iterator[tuple[str, Layer]]:
        for index, layer in enumerate(self.layers):
            yield f"{index}.{layer.kind}", layer

    def named_parameters(self) -> dict[str, Parameter]:
        params: dict[str, Parameter] = {}
        if self.shared_sigma is not None:
            params[SHARED_SIGMA_NAME] = self.shared_sigma
        for prefix, layer in self._layer_names():
            for local, param in layer.params.items():
                params[f"{prefix}.{local}"] = param
        return params

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.{local}": value
            for prefix, layer in self._layer_names()
            for local, value in layer.buffers().items()
        }

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(
            p.value.size for p in self.parameters() if p.trainable or not trainable_only
        )

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def probact_sites(self) -> list[ProbActLayer]:
        return [layer for layer in self.layers if isinstance(layer, ProbActLayer)]

    def named_probact_sites(self) -> dict[str, ProbActLayer]:
        return {n: layer for n, layer in self._layer_names() if isinstance(layer, ProbActLayer)}

    def has_batch_norm(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    @property
    def classifier(self) -> Dense:
        return self.layers[-1]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and buffers, keyed ``param.<name>`` / ``buffer.<name>``."""
        state = {f"param.{n}": p.value.numpy() for n, p in self.named_parameters().items()}
        state.update({f"buffer.{n}": v.copy() for n, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Restore parameters and buffers.

        Raises:
            CheckpointError: On missing or unexpected keys or a shape mismatch.
        """
        expected = set(self.state_dict())
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise CheckpointError(
                f"State does not match the model: missing {missing}, unexpected {unexpected}"
            )

        params = self.named_parameters()
        layers = dict(self._layer_names())
        for key, value in state.items():
            group, _, name = key.partition(".")
            if group == "param":
                param = params[name]
                if value.shape != param.shape:
                    raise CheckpointError(
                        f"Parameter '{name}' has shape {list(value.shape)}, "
                        f"model expects {list(param.shape)}"
                    )
                param.assign(value)
            else:
                layer_prefix, _, local = name.rpartition(".")
                layers[layer_prefix].load_buffer(local, np.asarray(value))


def build_model(
    spec: ModelSpec,
    activation: ActivationConfig,
    num_classes: int,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    dropout_p: float | None = None,
    seed: int = 0,
    dtype: np.dtype | type | None = None,
) -> Model:
    """Materialize ``spec`` for inputs of shape C×H×W.

    Numeric entries become conv 3x3 (padding 1), ``D<n>`` entries dense
    layers; both are followed by batch norm (when enabled) and the configured
    activation. ``M`` halves the spatial size. ``C`` flattens and adds the
    linear classifier, preceded by dropout when ``dropout_p`` is given.
    Every stochastic site (activation or dropout) gets its own layer id.

    Raises:
        ShapeError: If the resolution is incompatible with the pooling depth or
            a convolution follows a dense layer.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be positive, got {num_classes}")
    if len(input_shape) != 3:
        raise ShapeError(f"Input shape must be C×H×W, got {list(input_shape)}")
    dtype = np.dtype(dtype or default_dtype())

    shared_sigma = None
    if activation.kind == ActivationKind.PROBACT and activation.probact.mode == ProbActMode.SINGLE:
        shared_sigma = Parameter(
            create((), Fill(activation.probact.single_init), dtype), name=SHARED_SIGMA_NAME
        )

    layers: list[Layer] = []
    shape: tuple[int, ...] = tuple(input_shape)
    site_id = 0

    def add_activation(site_shape: tuple[int, ...], index: int) -> None:
        nonlocal site_id
        layers.append(
            create_activation(
                activation, site_shape, site_id, (seed, index, 1), dtype, shared_sigma
            )
        )
        site_id += 1

    def flatten() -> None:
        nonlocal shape
        if len(shape) > 1:
            layers.append(Flatten())
            shape = (math.prod(shape),)

    for index, entry in enumerate(spec.layers):
        if isinstance(entry, int):
            if len(shape) != 3:
                raise ShapeError(f"Convolution '{entry}' at position {index} follows a dense layer")
            layers.append(Conv2d(shape[0], entry, (seed, index), dtype))
            shape = (entry, shape[1], shape[2])
            if spec.batch_norm:
                layers.append(BatchNorm(entry, dtype))
            add_activation(shape, index)
        elif entry == "M":
            if len(shape) != 3:
                raise ShapeError(f"Pooling at position {index} follows a dense layer")
            if shape[1] % 2 or shape[2] % 2:
                raise ShapeError(
                    f"Resolution {list(input_shape[1:])} incompatible with pooling depth: "
                    f"{shape[1]}x{shape[2]} cannot be pooled at position {index}"
                )
            layers.append(MaxPool2d())
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif entry == "C":
            flatten()
            if dropout_p is not None:
                layers.append(Dropout(dropout_p, layer_id=site_id))
                site_id += 1
            layers.append(Dense(shape[0], num_classes, (seed, index), dtype))
        else:
            width = int(entry[1:])
            flatten()
            layers.append(Dense(shape[0], width, (seed, index), dtype))
            shape = (width,)
            if spec.batch_norm:
                layers.append(BatchNorm(width, dtype))
            add_activation(shape, index)

    model = Model(
        layers,
        spec,
        activation,
        num_classes,
        tuple(input_shape),
        dtype,
        dropout_p=dropout_p,
        shared_sigma=shared_sigma,
    )
    for name, param in model.named_parameters().items():
        param.name = name
    logger.debug(
        "Model built",
        spec=spec.name,
        activation=activation.label,
        layers=len(layers),
        parameters=model.parameter_count(),
        probact_sites=len(model.probact_sites()),
    )
    return model
