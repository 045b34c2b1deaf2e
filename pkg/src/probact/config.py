"""Configuration models for probact."""

import os
import re
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ActivationKind(str, Enum):
    """Activation families available at every activation site."""

    RELU = "relu"
    LEAKY = "leaky"
    PRELU = "prelu"
    SWISH = "swish"
    PROBACT = "probact"


class ProbActMode(str, Enum):
    """How the perturbation scale sigma is obtained."""

    FIXED = "fixed"
    SINGLE = "single"
    ELEMENTWISE = "elementwise"
    BOUNDED = "bounded"


class SigmaGranularity(str, Enum):
    """Shape of element-wise sigma (or k) parameters at one site."""

    ELEMENT = "element"
    CHANNEL = "channel"


class DatasetKind(str, Enum):
    """Supported datasets."""

    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"
    BLOBS = "blobs"
    SPIRALS = "spirals"


class OptimizerName(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class ScheduleKind(str, Enum):
    STEP_DECAY = "step_decay"
    CONSTANT = "constant"


# Classes per dataset kind (synthetic kinds take theirs from the config)
DATASET_CLASSES: dict[str, int] = {
    "cifar10": 10,
    "cifar100": 100,
}

# Layer lists: int = conv 3x3 + batch norm + activation, "M" = 2x2 max pool,
# "D<n>" = dense + batch norm + activation, "C" = linear classifier
MODEL_PRESETS: dict[str, list[int | str]] = {
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M", "C"],
    "vgg-lite": [32, 32, "M", 64, 64, "M", 128, 128, "M", "C"],
    "vgg-micro": [16, "M", 32, "M", "C"],
    "mlp": ["D64", "D64", "C"],
}  # fmt: skip

_DENSE_PATTERN = re.compile(r"^D(\d+)$")


class EvalMode(BaseModel):
    """How a trained stochastic network predicts.

    Accepts the shorthand strings ``stochastic``, ``mean`` and ``mc:<n>``.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["stochastic", "mean", "mc"] = Field(
        default="stochastic", description="Single draw, noise-free mean, or MC average"
    )
    samples: int = Field(default=1, ge=1, description="Draws averaged in mc mode")

    @model_validator(mode="before")
    @classmethod
    def parse_shorthand(cls, data: Any) -> Any:
        """Turn 'mc:16' style strings into field values."""
        if isinstance(data, str):
            kind, _, count = data.strip().partition(":")
            if kind == "mc":
                if not count:
                    raise ValueError("mc eval-mode needs a draw count, e.g. 'mc:16'")
                try:
                    return {"kind": "mc", "samples": int(count)}
                except ValueError as e:
                    raise ValueError(f"Invalid mc draw count: {count!r}") from e
            if count:
                raise ValueError(f"Eval-mode '{kind}' takes no argument")
            return {"kind": kind}
        return data

    @model_validator(mode="after")
    def validate_samples(self) -> "EvalMode":
        if self.kind != "mc" and self.samples != 1:
            raise ValueError(f"Only mc eval-mode averages draws, got samples={self.samples}")
        return self

    def __str__(self) -> str:
        return f"mc:{self.samples}" if self.kind == "mc" else self.kind


class ProbActConfig(BaseModel):
    """Variant selector for the ProbAct activation."""

    model_config = ConfigDict(frozen=True)

    mode: ProbActMode = Field(default=ProbActMode.BOUNDED, description="Sigma variant")
    sigma: float = Field(default=1.0, ge=0.0, description="Sigma for fixed mode")
    alpha: float = Field(default=2.0, gt=0.0, description="Upper bound of bounded sigma")
    beta: float = Field(default=5.0, gt=0.0, description="Slope of bounded sigma")
    eval_mode: EvalMode = Field(default_factory=EvalMode, description="Prediction mode")
    granularity: SigmaGranularity = Field(
        default=SigmaGranularity.ELEMENT, description="Element-wise parameter shape"
    )
    init: Literal["xavier"] = Field(
        default="xavier",
        description="Element-wise initializer; fans = element count of the site",
    )
    single_init: float = Field(default=0.0, description="Initial value of single sigma")

    @property
    def trainable(self) -> bool:
        return self.mode != ProbActMode.FIXED

    @property
    def elementwise(self) -> bool:
        return self.mode in (ProbActMode.ELEMENTWISE, ProbActMode.BOUNDED)


class ActivationConfig(BaseModel):
    """Activation selection applied at every activation site."""

    model_config = ConfigDict(frozen=True)

    kind: ActivationKind = Field(default=ActivationKind.RELU, description="Activation family")
    probact: ProbActConfig | None = Field(default=None, description="ProbAct settings")
    leaky_slope: float = Field(default=0.01, description="Negative slope of leaky ReLU")
    prelu_init: float = Field(default=0.25, description="Initial PReLU slope per channel")

    @model_validator(mode="before")
    @classmethod
    def default_probact(cls, data: Any) -> Any:
        """ProbAct without explicit settings gets the defaults."""
        if isinstance(data, dict) and data.get("kind") == "probact" and data.get("probact") is None:
            return {**data, "probact": {}}
        return data

    @model_validator(mode="after")
    def validate_probact(self) -> "ActivationConfig":
        if self.kind != ActivationKind.PROBACT and self.probact is not None:
            raise ValueError(f"ProbAct settings given for activation '{self.kind.value}'")
        return self

    @property
    def label(self) -> str:
        """Short, stable name used in file names and summary tables."""
        if self.kind != ActivationKind.PROBACT:
            return self.kind.value
        p = self.probact
        if p.mode == ProbActMode.FIXED:
            return f"probact-fixed-{p.sigma:g}"
        if p.mode == ProbActMode.BOUNDED:
            return f"probact-bounded-{p.alpha:g}-{p.beta:g}"
        return f"probact-{p.mode.value}"


def parse_activation(
    text: str,
    sigma: float | None = None,
    alpha: float | None = None,
    beta: float | None = None,
) -> ActivationConfig:
    """Parse ``relu|leaky|prelu|swish|probact:<mode>`` plus optional ProbAct knobs."""
    kind, _, mode = text.strip().partition(":")
    if kind != ActivationKind.PROBACT.value:
        if mode:
            raise ValueError(f"Activation '{kind}' takes no mode")
        return ActivationConfig(kind=kind)
    settings: dict[str, Any] = {"mode": mode or ProbActMode.BOUNDED.value}
    if sigma is not None:
        settings["sigma"] = sigma
    if alpha is not None:
        settings["alpha"] = alpha
    if beta is not None:
        settings["beta"] = beta
    return ActivationConfig(kind=ActivationKind.PROBACT, probact=ProbActConfig(**settings))


class ModelSpec(BaseModel):
    """Declarative layer list from which a network is materialized."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(default="custom", description="Preset or custom name")
    layers: list[int | str] = Field(..., description="Layer descriptors ending in 'C'")
    batch_norm: bool = Field(default=True, description="Batch norm after conv/dense layers")

    @field_validator("layers")
    @classmethod
    def validate_layers(cls, v: list[int | str]) -> list[int | str]:
        """Validate descriptors; 'C' must appear once, last."""
        if not v or v[-1] != "C":
            raise ValueError("Layer list must end with the classifier 'C'")
        for entry in v[:-1]:
            if isinstance(entry, int):
                if entry <= 0:
                    raise ValueError(f"Convolution width must be positive, got {entry}")
            elif entry != "M" and not _DENSE_PATTERN.match(entry):
                raise ValueError(f"Invalid layer descriptor '{entry}'. Valid: <int>, M, D<n>, C")
        return v

    @classmethod
    def preset(cls, name: str) -> "ModelSpec":
        if name not in MODEL_PRESETS:
            raise ValueError(
                f"Unknown model spec '{name}'. Valid: {', '.join(sorted(MODEL_PRESETS))}"
            )
        return cls(name=name, layers=MODEL_PRESETS[name])


class DatasetConfig(BaseModel):
    """Dataset selection and reduction."""

    kind: DatasetKind = Field(default=DatasetKind.BLOBS, description="Dataset to train on")
    path: Path | None = Field(default=None, description="Directory of CIFAR binary files")
    fraction: float = Field(default=1.0, gt=0.0, le=1.0, description="Stratified subset")
    n_train: int = Field(default=1024, ge=1, description="Synthetic training points")
    n_test: int = Field(default=512, ge=1, description="Synthetic test points")
    classes: int = Field(default=4, ge=2, description="Synthetic class count")
    noise: float = Field(default=0.3, ge=0.0, description="Synthetic noise scale")
    resolution: int = Field(default=8, ge=1, description="Synthetic image side length")
    seed: int = Field(default=0, ge=0, description="Synthetic generator seed")

    @model_validator(mode="after")
    def validate_synthetic(self) -> "DatasetConfig":
        if self.synthetic:
            for name in ("n_train", "n_test"):
                if getattr(self, name) % self.classes:
                    raise ValueError(f"{name} must be divisible by classes ({self.classes})")
        return self

    @property
    def synthetic(self) -> bool:
        return self.kind in (DatasetKind.BLOBS, DatasetKind.SPIRALS)

    @property
    def num_classes(self) -> int:
        return DATASET_CLASSES.get(self.kind.value, self.classes)


class DropoutConfig(BaseModel):
    """Dropout before the linear classification layer."""

    enabled: bool = Field(default=False, description="Insert dropout before the classifier")
    p: float = Field(default=0.5, ge=0.0, lt=1.0, description="Drop probability")


class ScheduleConfig(BaseModel):
    """Learning-rate schedule."""

    kind: ScheduleKind = Field(default=ScheduleKind.STEP_DECAY, description="Schedule type")
    drop: float = Field(default=0.1, gt=0.0, le=1.0, description="Multiplicative drop")
    every: int = Field(default=100, ge=1, description="Epochs between drops")


class OptimizerConfig(BaseModel):
    """Optimizer settings; Adam defaults beyond the rate are the standard ones."""

    name: OptimizerName = Field(default=OptimizerName.ADAM, description="Update rule")
    lr: float = Field(default=0.01, gt=0.0, description="Base learning rate")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0, description="Adam first-moment decay")
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0, description="Adam second-moment decay")
    eps: float = Field(default=1e-8, gt=0.0, description="Adam stabilizer")
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig, description="LR schedule")


class SeedConfig(BaseModel):
    """Every source of randomness in a run."""

    weights: int = Field(default=0, ge=0, description="Parameter initialization")
    noise: int = Field(default=0, ge=0, lt=2**32, description="ProbAct and dropout draws")
    subset: int = Field(default=0, ge=0, description="Stratified subset selection")
    shuffle: int = Field(default=0, ge=0, description="Minibatch order")


class TrainingConfig(BaseModel):
    """Loop settings."""

    epochs: int = Field(default=20, ge=1, description="Training epochs")
    batch_size: int = Field(default=256, ge=1, description="Minibatch size")
    eval_batch_size: int = Field(default=1000, ge=1, description="Evaluation batch size")


class MetricsConfig(BaseModel):
    """Prometheus textfile export."""

    enabled: bool = Field(default=True, description="Write metrics.prom into the run directory")


class ServiceConfig(BaseModel):
    """Process-level configuration."""

    log_level: Literal["debug", "info", "warning", "error"] = Field(
        default="info", description="Logging level"
    )
    log_format: Literal["console", "json"] = Field(default="console", description="Log renderer")
    metrics: MetricsConfig = Field(default_factory=MetricsConfig, description="Metrics config")


class RunConfig(BaseModel):
    """Root configuration: fully determines one training run."""

    version: Annotated[str, Field(pattern=r"^\d+$")] = Field(
        default="1", description="Config schema version"
    )
    name: str = Field(default="run", description="Run name")
    model: ModelSpec = Field(
        default_factory=lambda: ModelSpec.preset("vgg-lite"), description="Model spec"
    )
    activation: ActivationConfig = Field(
        default_factory=ActivationConfig, description="Activation at every site"
    )
    dataset: DatasetConfig = Field(default_factory=DatasetConfig, description="Dataset")
    training: TrainingConfig = Field(default_factory=TrainingConfig, description="Loop")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig, description="Optimizer")
    seeds: SeedConfig = Field(default_factory=SeedConfig, description="Seeds")
    dropout: DropoutConfig = Field(default_factory=DropoutConfig, description="Dropout")
    eval_mode: EvalMode = Field(default_factory=EvalMode, description="Test-time prediction")
    precision: Literal["float32", "float64"] = Field(
        default="float32", description="Float width of parameters and activations"
    )
    output_dir: Path | None = Field(default=None, description="Run directory")
    service: ServiceConfig = Field(default_factory=ServiceConfig, description="Service settings")

    @field_validator("model", mode="before")
    @classmethod
    def resolve_preset(cls, v: Any) -> Any:
        """Allow a preset name in place of a full spec."""
        if isinstance(v, str):
            return ModelSpec.preset(v)
        return v

    @model_validator(mode="after")
    def default_output_dir(self) -> "RunConfig":
        if self.output_dir is None:
            self.output_dir = Path("runs") / self.name
        return self

    @property
    def run_dir(self) -> Path:
        return self.output_dir or Path("runs") / self.name


class ProbactSettings(BaseSettings):
    """Environment defaults (PROBACT_*) for the CLI."""

    model_config = SettingsConfigDict(env_prefix="PROBACT_")

    log_level: Literal["debug", "info", "warning", "error"] | None = None
    log_format: Literal["console", "json"] | None = None
    dataset_dir: Path | None = None
    output_root: Path | None = None


def _substitute_env_vars(content: str) -> str:
    """Substitute ${VAR} and ${VAR:-default} patterns with environment variables."""
    pattern = r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}"

    def replace(match: re.Match) -> str:
        var_name = match.group(1)
        default = match.group(2)
        value = os.environ.get(var_name)
        if value is not None:
            return value
        if default is not None:
            return default
        return match.group(0)  # Keep original if no value and no default

    return re.sub(pattern, replace, content)


def load_config(path: str | Path) -> RunConfig:
    """Load a run configuration from a YAML file.

    Args:
        path: Path to the YAML configuration file.

    Returns:
        Validated RunConfig object.

    Raises:
        FileNotFoundError: If the config file doesn't exist.
        ValueError: If the config is invalid.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Configuration file not found: {path}")

    content = _substitute_env_vars(path.read_text())

    try:
        data = yaml.safe_load(content)
    except yaml.YAMLError as e:
        raise ValueError(f"Invalid YAML: {e}") from e

    if data is None:
        data = {}

    return RunConfig.model_validate(data)


def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Return a copy of ``config`` with CLI-style overrides applied.

    Recognized keys: ``activation`` (ActivationConfig), ``dataset_dir``,
    ``output_dir``, ``seed`` (sets all four seeds), ``eval_mode``,
    ``dropout`` (probability; enables dropout), ``epochs``, ``fraction``,
    ``name``. ``None`` values are ignored.
    """
    data = config.model_dump(mode="python")
    values = {k: v for k, v in overrides.items() if v is not None}

    if "activation" in values:
        data["activation"] = values["activation"].model_dump(mode="python")
    if "dataset_dir" in values:
        data["dataset"]["path"] = Path(values["dataset_dir"])
    if "fraction" in values:
        data["dataset"]["fraction"] = values["fraction"]
    if "seed" in values:
        data["seeds"] = {name: values["seed"] for name in ("weights", "noise", "subset", "shuffle")}
    if "eval_mode" in values:
        data["eval_mode"] = values["eval_mode"]
    if "dropout" in values:
        data["dropout"] = {"enabled": True, "p": values["dropout"]}
    if "epochs" in values:
        data["training"]["epochs"] = values["epochs"]
    if "name" in values:
        data["name"] = values["name"]
        if "output_dir" not in values:
            data["output_dir"] = None
    if "output_dir" in values:
        data["output_dir"] = Path(values["output_dir"])

    return RunConfig.model_validate(data)
