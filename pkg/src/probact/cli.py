"""CLI for probact."""

import logging
import sys
from collections.abc import Callable
from functools import wraps
from pathlib import Path
from typing import Any

import click
import structlog

from . import __version__
from .checkpoint import load_checkpoint
from .config import (
    ActivationKind,
    EvalMode,
    ProbactSettings,
    RunConfig,
    apply_overrides,
    load_config,
    parse_activation,
)
from .data import load_dataset
from .errors import ProbactError
from .report import CONFIG_FILE, SIGMA_TRAJECTORY_FILE, RunMetrics
from .report import export_k_histogram as write_k_histograms
from .report import export_sigma_trajectory as write_sigma_trajectory
from .report import export_timing as write_timing
from .suite import run_overfitting_suite, run_reduced_data_suite
from .trainer import evaluate as evaluate_checkpoint
from .trainer import run_training, swap_activation

CLI_ERRORS = (FileNotFoundError, ProbactError, ValueError, OSError)

EXAMPLE_CONFIG = """\
# probact run configuration
version: "1"
name: blobs-probact

# Preset name (vgg16, vgg-lite, vgg-micro, mlp) or a full spec:
# model:
#   name: custom
#   layers: [32, M, 64, M, C]
#   batch_norm: true
model: vgg-lite

activation:
  kind: probact            # relu | leaky | prelu | swish | probact
  probact:
    mode: bounded          # fixed | single | elementwise | bounded
    sigma: 1.0             # fixed mode only
    alpha: 2.0             # bounded mode: sigma in (0, alpha)
    beta: 5.0
    granularity: element   # element | channel

dataset:
  kind: blobs              # cifar10 | cifar100 | blobs | spirals
  path: ${PROBACT_DATASET_DIR:-}
  fraction: 1.0            # stratified subset of the training set
  n_train: 1024
  n_test: 512
  classes: 4
  noise: 0.3
  resolution: 8

training:
  epochs: 20
  batch_size: 256

optimizer:
  name: adam
  lr: 0.01
  schedule:
    kind: step_decay       # lr * 0.1 every 100 epochs
    drop: 0.1
    every: 100

seeds:
  weights: 0
  noise: 0
  subset: 0
  shuffle: 0

dropout:
  enabled: false
  p: 0.5

eval_mode: stochastic      # stochastic | mean | mc:<n>
precision: float32
output_dir: runs/blobs-probact

service:
  log_level: info
  log_format: console
  metrics:
    enabled: true
"""


def configure_logging(level: str = "info", fmt: str = "console") -> None:
    """Configure structlog for console or JSON output on stderr."""
    renderer = (
        structlog.processors.JSONRenderer()
        if fmt == "json"
        else structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty())
    )
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelName(level.upper())
        ),
        context_class=dict,
        logger_factory=lambda *args: structlog.PrintLogger(sys.stderr),
        cache_logger_on_first_use=False,
    )


def _fail(message: str) -> None:
    click.echo(f"Error: {message}", err=True)
    sys.exit(1)


def handle_errors(func: Callable[..., None]) -> Callable[..., None]:
    """Report expected failures as 'Error: ...' and exit 1."""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            func(*args, **kwargs)
        except CLI_ERRORS as e:
            _fail(str(e))

    return wrapper


def run_options(func: Callable[..., None]) -> Callable[..., None]:
    """Options shared by every command that builds a RunConfig."""
    options = [
        click.option(
            "--config",
            "-c",
            "config_path",
            type=click.Path(exists=True, path_type=Path),
            default=None,
            help="Path to configuration file (defaults apply without one).",
        ),
        click.option("--dataset-dir", type=click.Path(path_type=Path), help="CIFAR directory."),
        click.option("--out", "-o", type=click.Path(path_type=Path), help="Output directory."),
        click.option("--seed", type=click.IntRange(min=0), help="Set all four seeds."),
        click.option("--eval-mode", help="stochastic | mean | mc:<n>."),
        click.option("--activation", help="relu | leaky | prelu | swish | probact:<mode>."),
        click.option("--sigma", type=float, help="Sigma of fixed-mode ProbAct."),
        click.option("--alpha", type=float, help="Bound of bounded-mode ProbAct."),
        click.option("--beta", type=float, help="Slope of bounded-mode ProbAct."),
        click.option("--dropout", type=float, help="Enable dropout with this probability."),
        click.option("--epochs", type=click.IntRange(min=1), help="Training epochs."),
        click.option("--fraction", type=float, help="Stratified training subset."),
        click.option("--name", help="Run name."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_config(settings: ProbactSettings, config_path: Path | None, **flags: Any) -> RunConfig:
    """Config file (or defaults), then environment defaults, then CLI flags."""
    config = load_config(config_path) if config_path else RunConfig()

    activation_text = flags.pop("activation")
    sigma, alpha, beta = flags.pop("sigma"), flags.pop("alpha"), flags.pop("beta")
    if activation_text:
        flags["activation"] = parse_activation(activation_text, sigma, alpha, beta)
    elif any(v is not None for v in (sigma, alpha, beta)):
        if config.activation.kind != ActivationKind.PROBACT:
            raise ValueError("--sigma/--alpha/--beta need a ProbAct activation")
        knobs = {"sigma": sigma, "alpha": alpha, "beta": beta}
        flags["activation"] = config.activation.model_copy(
            update={
                "probact": config.activation.probact.model_copy(
                    update={k: v for k, v in knobs.items() if v is not None}
                )
            }
        )

    if flags.get("eval_mode") is not None:
        flags["eval_mode"] = EvalMode.model_validate(flags["eval_mode"])
    flags["output_dir"] = flags.pop("out")
    if flags["dataset_dir"] is None and config.dataset.path is None:
        flags["dataset_dir"] = settings.dataset_dir
    if flags["output_dir"] is None and settings.output_root is not None:
        flags["output_dir"] = settings.output_root / (flags.get("name") or config.name)
    return apply_overrides(config, **flags)


def _setup(ctx: click.Context, config: RunConfig | None = None) -> None:
    """Configure logging: flag, then environment, then config file."""
    settings: ProbactSettings = ctx.obj["settings"]
    service = config.service if config else None
    level = ctx.obj["log_level"] or settings.log_level or (service.log_level if service else "info")
    fmt = ctx.obj["log_format"] or settings.log_format or (
        service.log_format if service else "console"
    )
    configure_logging(level, fmt)


@click.group()
@click.version_option(version=__version__, prog_name="probact")
@click.option(
    "--log-level",
    type=click.Choice(["debug", "info", "warning", "error"]),
    default=None,
    help="Logging level (env: PROBACT_LOG_LEVEL).",
)
@click.option(
    "--log-format",
    type=click.Choice(["console", "json"]),
    default=None,
    help="Log renderer (env: PROBACT_LOG_FORMAT).",
)
@click.pass_context
def main(ctx: click.Context, log_level: str | None, log_format: str | None) -> None:
    """probact - ProbAct stochastic activations: training, evaluation and experiments."""
    ctx.ensure_object(dict)
    ctx.obj.update(settings=ProbactSettings(), log_level=log_level, log_format=log_format)


@main.command()
@run_options
@click.pass_context
@handle_errors
def train(ctx: click.Context, config_path: Path | None, **flags: Any) -> None:
    """Train one configured run."""
    config = build_config(ctx.obj["settings"], config_path, **flags)
    _setup(ctx, config)
    result = run_training(config)
    final = result.final
    click.echo(f"✓ Run finished: {config.run_dir}")
    click.echo(f"  Activation: {config.activation.label}")
    click.echo(f"  Train accuracy: {final.train_accuracy:.2f}%")
    click.echo(f"  Test accuracy:  {final.test_accuracy:.2f}% ({config.eval_mode})")
    click.echo(f"  Gamma: {result.gamma:.2f}")


@main.command("eval")
@click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, path_type=Path),
    required=True,
    help="Checkpoint file.",
)
@click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(exists=True, path_type=Path),
    default=None,
    help="Config naming the dataset (default: config.json next to the checkpoint).",
)
@click.option("--dataset-dir", type=click.Path(path_type=Path), help="CIFAR directory.")
@click.option("--eval-mode", default=None, help="stochastic | mean | mc:<n>.")
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.option("--repeats", type=click.IntRange(min=1), default=1, help="Independent evaluations.")
@click.pass_context
@handle_errors
def eval_command(
    ctx: click.Context,
    checkpoint_path: Path,
    config_path: Path | None,
    dataset_dir: Path | None,
    eval_mode: str | None,
    split: str,
    repeats: int,
) -> None:
    """Evaluate a checkpoint."""
    _setup(ctx)
    checkpoint = load_checkpoint(checkpoint_path)
    if config_path is None:
        sidecar = checkpoint_path.parent / CONFIG_FILE
        if not sidecar.exists():
            raise FileNotFoundError(f"No --config given and no {CONFIG_FILE} at {sidecar}")
        config = RunMetrics.load(checkpoint_path.parent).config
    else:
        config = load_config(config_path)
    config = apply_overrides(
        config, dataset_dir=dataset_dir or config.dataset.path or ctx.obj["settings"].dataset_dir
    )
    mode = EvalMode.model_validate(eval_mode) if eval_mode else checkpoint.meta.eval_mode

    train_set, test_set = load_dataset(config.dataset, checkpoint.meta.precision)
    dataset = test_set if split == "test" else train_set
    accuracies = [
        evaluate_checkpoint(checkpoint, dataset, mode, repeat=r) for r in range(repeats)
    ]
    for repeat, accuracy in enumerate(accuracies):
        click.echo(f"  repeat {repeat}: {accuracy:.2f}%")
    click.echo(f"✓ Accuracy ({mode}, {split}): {sum(accuracies) / len(accuracies):.2f}%")


@main.command()
@click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, path_type=Path),
    required=True,
    help="ProbAct checkpoint.",
)
@click.option("--out", "-o", type=click.Path(path_type=Path), required=True)
@click.pass_context
@handle_errors
def swap(ctx: click.Context, checkpoint_path: Path, out: Path) -> None:
    """Replace ProbAct with ReLU in a trained checkpoint."""
    _setup(ctx)
    swap_activation(checkpoint_path, out)
    click.echo(f"✓ Swapped checkpoint written: {out}")


def _parse_fractions(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"Invalid fraction list: {text}") from e


def _echo_cells(result: Any) -> None:
    for cell in result.cells:
        dropout = " +dropout" if cell.dropout else ""
        click.echo(
            f"  {cell.activation}{dropout} @ {cell.fraction:g}: "
            f"test {cell.mean_test_accuracy:.2f}%  gamma {cell.mean_gamma:.2f} "
            f"({cell.repeats} runs)"
        )


@main.command("reduced-suite")
@run_options
@click.option("--fractions", default="0.5,0.25", help="Comma-separated subset fractions.")
@click.option("--repeats", type=click.IntRange(min=1), default=3)
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Runs in parallel.")
@click.pass_context
@handle_errors
def reduced_suite(
    ctx: click.Context,
    config_path: Path | None,
    fractions: str,
    repeats: int,
    workers: int,
    **flags: Any,
) -> None:
    """ReLU vs ProbAct on stratified training subsets."""
    config = build_config(ctx.obj["settings"], config_path, **flags)
    _setup(ctx, config)
    result = run_reduced_data_suite(
        config, _parse_fractions(fractions), repeats=repeats, workers=workers
    )
    click.echo(f"✓ Suite finished: {config.run_dir}")
    _echo_cells(result)


@main.command("overfit-suite")
@run_options
@click.option("--dropout-p", type=float, default=0.5, help="Dropout probability of the on cells.")
@click.option("--repeats", type=click.IntRange(min=1), default=1)
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Runs in parallel.")
@click.pass_context
@handle_errors
def overfit_suite(
    ctx: click.Context,
    config_path: Path | None,
    dropout_p: float,
    repeats: int,
    workers: int,
    **flags: Any,
) -> None:
    """Overfitting gap per activation, with and without dropout."""
    config = build_config(ctx.obj["settings"], config_path, **flags)
    _setup(ctx, config)
    result = run_overfitting_suite(config, dropout_p=dropout_p, repeats=repeats, workers=workers)
    click.echo(f"✓ Suite finished: {config.run_dir}")
    _echo_cells(result)


@main.group()
def export() -> None:
    """Export sigma trajectories, k histograms and timing tables."""


@export.command("sigma")
@click.option(
    "--run-dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True
)
@click.option("--out", "-o", type=click.Path(path_type=Path), default=None)
@click.pass_context
@handle_errors
def export_sigma(ctx: click.Context, run_dir: Path, out: Path | None) -> None:
    """Write sigma_trajectory.csv for a trainable-sigma run."""
    _setup(ctx)
    path = write_sigma_trajectory(RunMetrics.load(run_dir), out or run_dir / SIGMA_TRAJECTORY_FILE)
    click.echo(f"✓ Exported to {path}")


@export.command("khist")
@click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, path_type=Path),
    required=True,
)
@click.option("--bins", type=click.IntRange(min=1), default=30)
@click.option("--space", type=click.Choice(["k", "sigma"]), default="k")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@handle_errors
def export_khist(
    ctx: click.Context, checkpoint_path: Path, bins: int, space: str, out_dir: Path | None
) -> None:
    """Write k_hist_layer<i>.csv per ProbAct site."""
    _setup(ctx)
    paths = write_k_histograms(
        load_checkpoint(checkpoint_path), out_dir or checkpoint_path.parent, bins, space
    )
    click.echo(f"✓ Exported {len(paths)} histograms")
    for path in paths:
        click.echo(f"  {path}")


@export.command("timing")
@click.argument(
    "run_dirs", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path)
)
@click.option("--out", "-o", type=click.Path(path_type=Path), required=True)
@click.option("--baseline", default="relu", help="Activation label used as the ratio base.")
@click.pass_context
@handle_errors
def export_timing(
    ctx: click.Context, run_dirs: tuple[Path, ...], out: Path, baseline: str
) -> None:
    """Mean epoch wall clock per activation relative to the baseline."""
    _setup(ctx)
    path = write_timing([RunMetrics.load(d) for d in run_dirs], out, baseline)
    click.echo(f"✓ Exported to {path}")


@main.command()
@click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(exists=True, path_type=Path),
    default="config.yaml",
    help="Path to configuration file.",
)
def validate(config_path: Path) -> None:
    """Validate configuration file."""
    try:
        config = load_config(config_path)
    except FileNotFoundError as e:
        click.echo(f"✗ Error: {e}", err=True)
        sys.exit(1)
    except Exception as e:
        click.echo(f"✗ Configuration error: {e}", err=True)
        sys.exit(1)

    click.echo(f"✓ Configuration is valid: {config_path}")
    click.echo(f"  Model: {config.model.name} {config.model.layers}")
    click.echo(f"  Activation: {config.activation.label}")
    fraction = f" (fraction {config.dataset.fraction:g})" if config.dataset.fraction < 1 else ""
    click.echo(f"  Dataset: {config.dataset.kind.value}{fraction}")
    click.echo(
        f"  Training: {config.training.epochs} epochs, batch {config.training.batch_size}, "
        f"{config.optimizer.name.value} lr {config.optimizer.lr:g}"
    )
    if config.dropout.enabled:
        click.echo(f"  Dropout: p={config.dropout.p:g}")
    click.echo(f"  Eval mode: {config.eval_mode}")
    click.echo(f"  Output: {config.run_dir}")


@main.command("init")
@click.option("--output", "-o", type=click.Path(path_type=Path), default="config.yaml")
def init_config(output: Path) -> None:
    """Generate example configuration file."""
    if output.exists():
        if not click.confirm(f"File {output} exists. Overwrite?"):
            sys.exit(0)

    output.write_text(EXAMPLE_CONFIG)
    click.echo(f"✓ Created example configuration: {output}")
    click.echo("\nEdit the file to choose the model, activation and dataset.")
    click.echo(f"Then run: probact validate -c {output}")


if __name__ == "__main__":
    main()
