"""Run metrics, the overfitting gap and the CSV exports."""

import csv
import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal

import numpy as np
import structlog

from .checkpoint import Checkpoint
from .config import ActivationKind, ProbActMode, RunConfig
from .errors import UsageError

logger = structlog.get_logger()

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
SIGMA_STATS_FILE = "sigma_stats.csv"
SIGMA_TRAJECTORY_FILE = "sigma_trajectory.csv"
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.npz"
PROM_FILE = "metrics.prom"


def gamma(train_acc: float, test_acc: float) -> float:
    """Overfitting gap in percentage points: train accuracy minus test accuracy."""
    for label, value in (("train", train_acc), ("test", test_acc)):
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"{label} accuracy must be a percentage in [0, 100], got {value}")
    return train_acc - test_acc


@dataclass
class EpochRecord:
    """One row of metrics.csv."""

    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    gamma: float


@dataclass
class EpochTiming:
    """One row of timing.csv."""

    epoch: int
    train_seconds: float
    test_seconds: float


@dataclass
class SigmaStats:
    """Effective sigma summary of one ProbAct site after one epoch (0 = initial)."""

    epoch: int
    site: str
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, epoch: int, site: str, sigma: np.ndarray) -> "SigmaStats":
        values = np.asarray(sigma, dtype=np.float64)
        return cls(
            epoch,
            site,
            float(values.mean()),
            float(values.std()),
            float(values.min()),
            float(values.max()),
        )


@dataclass
class RunMetrics:
    """Everything a run reports, in memory."""

    config: RunConfig
    epochs: list[EpochRecord] = field(default_factory=list)
    timing: list[EpochTiming] = field(default_factory=list)
    sigma: list[SigmaStats] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        if not self.epochs:
            raise UsageError("Run has no completed epochs")
        return self.epochs[-1]

    @property
    def gamma(self) -> float:
        return gamma(self.final.train_accuracy, self.final.test_accuracy)

    def write(self, run_dir: Path) -> None:
        """Write metrics.csv, timing.csv, sigma_stats.csv and config.json."""
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_rows(run_dir / METRICS_FILE, EpochRecord, self.epochs)
        _write_rows(run_dir / TIMING_FILE, EpochTiming, self.timing)
        _write_rows(run_dir / SIGMA_STATS_FILE, SigmaStats, self.sigma)
        (run_dir / CONFIG_FILE).write_text(self.config.model_dump_json(indent=2) + "\n")

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunMetrics":
        """Read the files written by :meth:`write`."""
        run_dir = Path(run_dir)
        config_path = run_dir / CONFIG_FILE
        if not config_path.exists():
            raise FileNotFoundError(f"Not a run directory (no {CONFIG_FILE}): {run_dir}")
        config = RunConfig.model_validate(json.loads(config_path.read_text()))
        return cls(
            config=config,
            epochs=_read_rows(run_dir / METRICS_FILE, EpochRecord),
            timing=_read_rows(run_dir / TIMING_FILE, EpochTiming),
            sigma=_read_rows(run_dir / SIGMA_STATS_FILE, SigmaStats),
        )


def _format(value: object) -> str:
    # repr round-trips floats exactly
    return repr(value) if isinstance(value, float) else str(value)


def _write_rows(path: Path, row_type: type, rows: Iterable[object]) -> None:
    names = [f.name for f in fields(row_type)]
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            values = asdict(row)
            writer.writerow([_format(values[name]) for name in names])


def _read_rows(path: Path, row_type: type) -> list:
    if not path.exists():
        return []
    types = {f.name: f.type for f in fields(row_type)}
    with path.open(newline="") as f:
        return [
            row_type(**{name: _coerce(types[name], value) for name, value in record.items()})
            for record in csv.DictReader(f)
        ]


def _coerce(kind: object, value: str) -> object:
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def _check_trainable(config: RunConfig) -> ProbActMode:
    activation = config.activation
    if activation.kind != ActivationKind.PROBACT or not activation.probact.trainable:
        raise UsageError(
            f"Run '{config.name}' uses activation '{activation.label}', "
            "which has no trainable sigma"
        )
    return activation.probact.mode


def export_sigma_trajectory(metrics: RunMetrics, path: str | Path) -> Path:
    """Write epoch -> sigma (single mode) or epoch -> per-site mean sigma.

    Raises:
        UsageError: If the run did not train sigma.
    """
    mode = _check_trainable(metrics.config)
    path = Path(path)
    sites = list(dict.fromkeys(s.site for s in metrics.sigma))
    by_epoch: dict[int, dict[str, float]] = {}
    for stats in metrics.sigma:
        by_epoch.setdefault(stats.epoch, {})[stats.site] = stats.mean

    expected = list(range(len(metrics.epochs) + 1))
    if sorted(by_epoch) != expected:
        raise UsageError(
            f"Sigma statistics cover epochs {sorted(by_epoch)}, expected 0..{len(metrics.epochs)}"
        )

    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if mode == ProbActMode.SINGLE:
            writer.writerow(["epoch", "sigma"])
            for epoch in expected:
                writer.writerow([epoch, _format(by_epoch[epoch][sites[0]])])
        else:
            writer.writerow(["epoch", *(f"{site}.mean_sigma" for site in sites)])
            for epoch in expected:
                writer.writerow([epoch, *(_format(by_epoch[epoch][s]) for s in sites)])
    logger.info("Sigma trajectory exported", path=str(path), epochs=len(expected))
    return path


def export_k_histogram(
    checkpoint: Checkpoint,
    out_dir: str | Path,
    bins: int = 30,
    space: Literal["k", "sigma"] = "k",
) -> list[Path]:
    """Write one histogram CSV per ProbAct site of an element-wise run.

    ``space="sigma"`` maps k through the bound first (bounded mode) and bins
    over (0, alpha).

    Raises:
        UsageError: If the checkpoint has no element-wise sigma or k.
    """
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    activation = checkpoint.meta.activation
    if activation.kind != ActivationKind.PROBACT or not activation.probact.elementwise:
        raise UsageError(
            f"Histogram export needs element-wise ProbAct, checkpoint uses '{activation.label}'"
        )
    probact = activation.probact
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = checkpoint.build_model()

    paths = []
    for index, site in enumerate(model.probact_sites()):
        if space == "sigma":
            values = site.sigma().ravel()
            limit = probact.alpha if probact.mode == ProbActMode.BOUNDED else None
            value_range = (0.0, limit) if limit is not None else None
        else:
            values = site.parameter.data.ravel()
            value_range = None
        counts, edges = np.histogram(values.astype(np.float64), bins=bins, range=value_range)
        path = out_dir / f"k_hist_layer{index}.csv"
        with path.open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["bin_left", "bin_right", "count"])
            for left, right, count in zip(edges[:-1], edges[1:], counts, strict=True):
                writer.writerow([_format(float(left)), _format(float(right)), int(count)])
        paths.append(path)
    logger.info("Histograms exported", sites=len(paths), space=space, out_dir=str(out_dir))
    return paths


@dataclass
class TimingRow:
    label: str
    train_seconds: float
    test_seconds: float
    train_ratio: float
    test_ratio: float


def timing_table(runs: Sequence[RunMetrics], baseline: str = "relu") -> list[TimingRow]:
    """Mean epoch wall clock per activation and its ratio to the baseline.

    Raises:
        UsageError: If no run uses the baseline activation.
    """
    totals: dict[str, list[tuple[float, float]]] = {}
    for run in runs:
        label = run.config.activation.label
        totals.setdefault(label, []).extend((t.train_seconds, t.test_seconds) for t in run.timing)
    if baseline not in totals or not totals[baseline]:
        raise UsageError(f"No '{baseline}' run with timing data to compare against")

    means = {label: np.mean(np.asarray(rows), axis=0) for label, rows in totals.items() if rows}
    base_train, base_test = means[baseline]
    return [
        TimingRow(
            label,
            float(train),
            float(test),
            float(train / base_train) if base_train else float("nan"),
            float(test / base_test) if base_test else float("nan"),
        )
        for label, (train, test) in means.items()
    ]


def export_timing(runs: Sequence[RunMetrics], path: str | Path, baseline: str = "relu") -> Path:
    """Write the timing table as CSV."""
    path = Path(path)
    rows = timing_table(runs, baseline)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(path, TimingRow, rows)
    return path
