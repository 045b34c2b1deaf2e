"""Multi-run experiment suites: reduced data and overfitting gap."""

import csv
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import structlog

from .config import (
    ActivationConfig,
    ActivationKind,
    ProbActConfig,
    ProbActMode,
    RunConfig,
)
from .data import Dataset, load_dataset
from .trainer import run_training

logger = structlog.get_logger()

SUMMARY_FILE = "summary.csv"
RUNS_FILE = "runs.csv"


@dataclass(frozen=True)
class SuiteJob:
    """One run of a suite."""

    config: RunConfig
    fraction: float
    repeat: int
    dropout: bool


@dataclass
class SuiteRun:
    """Outcome of one run, with the seeds it used."""

    activation: str
    fraction: float
    dropout: bool
    repeat: int
    weights_seed: int
    noise_seed: int
    subset_seed: int
    shuffle_seed: int
    train_accuracy: float
    test_accuracy: float
    gamma: float
    run_dir: str


@dataclass
class SuiteCell:
    """Mean over the repeats of one (activation, fraction, dropout) cell."""

    activation: str
    fraction: float
    dropout: bool
    repeats: int
    mean_train_accuracy: float
    mean_test_accuracy: float
    mean_gamma: float


@dataclass
class SuiteResult:
    runs: list[SuiteRun]
    cells: list[SuiteCell]

    def cell(self, activation: str, fraction: float = 1.0, dropout: bool = False) -> SuiteCell:
        for cell in self.cells:
            if (cell.activation, cell.fraction, cell.dropout) == (activation, fraction, dropout):
                return cell
        raise KeyError((activation, fraction, dropout))


def _job_config(
    base: RunConfig,
    activation: ActivationConfig,
    fraction: float,
    repeat: int,
    dropout_p: float | None,
    out_dir: Path,
) -> RunConfig:
    """Run config of one cell repeat; every seed is shifted by the repeat index."""
    name = f"{activation.label}-f{fraction:g}-r{repeat}"
    if dropout_p is not None:
        name += f"-dropout{dropout_p:g}"
    data = base.model_dump(mode="python")
    data.update(
        name=f"{base.name}-{name}",
        output_dir=out_dir / name,
        activation=activation.model_dump(mode="python"),
        seeds={k: v + repeat for k, v in base.seeds.model_dump().items()},
        dropout={"enabled": dropout_p is not None, "p": dropout_p or base.dropout.p},
    )
    data["dataset"]["fraction"] = fraction
    return RunConfig.model_validate(data)


def _execute(job: SuiteJob, datasets: tuple[Dataset, Dataset]) -> SuiteRun:
    config = job.config
    result = run_training(config, datasets)
    seeds = config.seeds
    run = SuiteRun(
        activation=config.activation.label,
        fraction=job.fraction,
        dropout=job.dropout,
        repeat=job.repeat,
        weights_seed=seeds.weights,
        noise_seed=seeds.noise,
        subset_seed=seeds.subset,
        shuffle_seed=seeds.shuffle,
        train_accuracy=result.final.train_accuracy,
        test_accuracy=result.final.test_accuracy,
        gamma=result.gamma,
        run_dir=str(config.run_dir),
    )
    logger.info(
        "Suite cell finished",
        activation=run.activation,
        fraction=run.fraction,
        dropout=run.dropout,
        repeat=run.repeat,
        seeds=seeds.model_dump(),
        test_accuracy=run.test_accuracy,
        gamma=run.gamma,
    )
    return run


def _summarize(runs: list[SuiteRun]) -> list[SuiteCell]:
    groups: dict[tuple[str, float, bool], list[SuiteRun]] = {}
    for run in runs:
        groups.setdefault((run.activation, run.fraction, run.dropout), []).append(run)
    return [
        SuiteCell(
            activation=activation,
            fraction=fraction,
            dropout=dropout,
            repeats=len(members),
            mean_train_accuracy=float(np.mean([r.train_accuracy for r in members])),
            mean_test_accuracy=float(np.mean([r.test_accuracy for r in members])),
            mean_gamma=float(np.mean([r.gamma for r in members])),
        )
        for (activation, fraction, dropout), members in groups.items()
    ]


def _write_table(path: Path, row_type: type, rows: Sequence[object]) -> None:
    names = [f.name for f in fields(row_type)]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def run_suite(
    jobs: list[SuiteJob],
    out_dir: Path,
    datasets: tuple[Dataset, Dataset],
    workers: int = 1,
) -> SuiteResult:
    """Run jobs (in parallel when workers > 1) and write runs.csv and summary.csv.

    Each run is deterministic in its own config, so results do not depend on
    the number of workers.
    """
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers}")
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Suite started", runs=len(jobs), workers=workers, out_dir=str(out_dir))
    if workers == 1:
        runs = [_execute(job, datasets) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(lambda job: _execute(job, datasets), jobs))

    result = SuiteResult(runs=runs, cells=_summarize(runs))
    _write_table(out_dir / RUNS_FILE, SuiteRun, result.runs)
    _write_table(out_dir / SUMMARY_FILE, SuiteCell, result.cells)
    logger.info("Suite finished", cells=len(result.cells), summary=str(out_dir / SUMMARY_FILE))
    return result


def _default_comparison(config: RunConfig) -> list[ActivationConfig]:
    relu = ActivationConfig(kind=ActivationKind.RELU)
    if config.activation.kind == ActivationKind.PROBACT:
        return [relu, config.activation]
    return [relu, ActivationConfig(kind=ActivationKind.PROBACT)]


def run_reduced_data_suite(
    config: RunConfig,
    fractions: Sequence[float] = (0.5, 0.25),
    repeats: int = 3,
    activations: Sequence[ActivationConfig] | None = None,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> SuiteResult:
    """ReLU against ProbAct on stratified subsets, ``repeats`` subset seeds per fraction.

    Activations default to ReLU plus the configured ProbAct (bounded ProbAct if
    the config names a baseline). Every repeat shifts all four seeds.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be positive, got {repeats}")
    activations = list(activations or _default_comparison(config))
    out_dir = Path(out_dir) if out_dir is not None else config.run_dir
    datasets = load_dataset(config.dataset, np.dtype(config.precision))
    jobs = [
        SuiteJob(
            _job_config(config, activation, fraction, repeat, None, out_dir),
            fraction,
            repeat,
            False,
        )
        for fraction in fractions
        for repeat in range(repeats)
        for activation in activations
    ]
    return run_suite(jobs, out_dir, datasets, workers)


def run_overfitting_suite(
    config: RunConfig,
    activations: Sequence[ActivationConfig] | None = None,
    dropout_p: float = 0.5,
    repeats: int = 1,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> SuiteResult:
    """Gap between train and test accuracy per activation, with and without dropout.

    Activations default to ReLU and fixed-sigma ProbAct (sigma = 1).
    """
    if repeats < 1:
        raise ValueError(f"repeats must be positive, got {repeats}")
    if activations is None:
        activations = [
            ActivationConfig(kind=ActivationKind.RELU),
            ActivationConfig(
                kind=ActivationKind.PROBACT,
                probact=ProbActConfig(mode=ProbActMode.FIXED, sigma=1.0),
            ),
        ]
    out_dir = Path(out_dir) if out_dir is not None else config.run_dir
    datasets = load_dataset(config.dataset, np.dtype(config.precision))
    fraction = config.dataset.fraction
    jobs = [
        SuiteJob(
            _job_config(config, activation, fraction, repeat, p, out_dir),
            fraction,
            repeat,
            p is not None,
        )
        for p in (None, dropout_p)
        for repeat in range(repeats)
        for activation in activations
    ]
    return run_suite(jobs, out_dir, datasets, workers)
