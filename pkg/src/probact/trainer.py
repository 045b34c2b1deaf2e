"""Training runs, evaluation and the activation swap."""

import time
from pathlib import Path

import numpy as np
import structlog

from .autodiff import Tape, Variable
from .checkpoint import Checkpoint, load_checkpoint
from .config import ActivationConfig, ActivationKind, EvalMode, RunConfig
from .data import Dataset, batches, load_dataset, stratified_subset
from .errors import CheckpointError, NumericError, TrainingDivergedError, UsageError
from .functional import softmax_cross_entropy
from .layers import ForwardContext
from .metrics import TrainingMetrics
from .models import SHARED_SIGMA_NAME, Model, build_model
from .optim import Optimizer, create_optimizer
from .report import (
    CHECKPOINT_FILE,
    PROM_FILE,
    SIGMA_TRAJECTORY_FILE,
    EpochRecord,
    EpochTiming,
    RunMetrics,
    SigmaStats,
    export_sigma_trajectory,
    gamma,
)
from .tensor import Tensor, check_finite

logger = structlog.get_logger()

# Evaluation draws start above every training draw id
EVAL_DRAW_OFFSET = 2**16


def eval_draw_id(eval_mode: EvalMode, repeat: int, draw: int = 0) -> int:
    """Draw id of evaluation draw ``draw`` of repeat ``repeat``."""
    return EVAL_DRAW_OFFSET + repeat * eval_mode.samples + draw


def evaluate_model(
    model: Model,
    dataset: Dataset,
    eval_mode: EvalMode,
    noise_seed: int = 0,
    batch_size: int = 1000,
    repeat: int = 0,
) -> tuple[float, float]:
    """Mean loss and top-1 accuracy (percent) of ``model`` on ``dataset``.

    In mc mode the logits of n stochastic passes are averaged. Ties in the
    logits resolve to the smallest class index.
    """
    draws = eval_mode.samples if eval_mode.kind == "mc" else 1
    pass_mode = EvalMode(kind="stochastic") if eval_mode.kind == "mc" else eval_mode
    total_loss, correct = 0.0, 0
    for step, batch in enumerate(batches(dataset, batch_size, shuffle_seed=None)):
        logits = None
        for d in range(draws):
            ctx = ForwardContext(
                training=False,
                step=step,
                noise_seed=noise_seed,
                draw_id=eval_draw_id(eval_mode, repeat, d),
                eval_mode=pass_mode,
            )
            out = model(batch.images, ctx).data
            logits = out.astype(np.float64) if logits is None else logits + out
        logits = (logits / draws).astype(model.dtype)
        loss = softmax_cross_entropy(Variable(Tensor.wrap(logits)), batch.labels)
        total_loss += float(loss.data) * len(batch.labels)
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    n = max(len(dataset), 1)
    return total_loss / n, 100.0 * correct / n


class Trainer:
    """Runs one configured training job."""

    def __init__(
        self, config: RunConfig, datasets: tuple[Dataset, Dataset] | None = None
    ) -> None:
        """Initialize the trainer.

        Args:
            config: Validated run configuration.
            datasets: Preloaded (train, test) sets; loaded from the config if None.
        """
        self.config = config
        self.dtype = np.dtype(config.precision)
        self.log = logger.bind(component="trainer", run=config.name)
        self.run_dir = config.run_dir

        if datasets is None:
            datasets = load_dataset(config.dataset, self.dtype)
        train, test = datasets
        self.train_set = stratified_subset(train, config.dataset.fraction, config.seeds.subset)
        self.test_set = test
        self.log.info(
            "Data ready",
            train=len(self.train_set),
            test=len(self.test_set),
            fraction=config.dataset.fraction,
            subset_seed=config.seeds.subset,
        )

        dropout_p = config.dropout.p if config.dropout.enabled else None
        self.model = build_model(
            config.model,
            config.activation,
            self.train_set.num_classes,
            input_shape=self.train_set.image_shape,
            dropout_p=dropout_p,
            seed=config.seeds.weights,
            dtype=self.dtype,
        )
        self.optimizer: Optimizer = create_optimizer(
            self.model.named_parameters(), config.optimizer
        )
        self.metrics = TrainingMetrics(config.name, config.activation.label)
        self.global_step = 0
        self.log.info(
            "Model built",
            spec=config.model.name,
            activation=config.activation.label,
            parameters=self.model.parameter_count(),
            probact_sites=len(self.model.probact_sites()),
        )

    def sigma_stats(self, epoch: int) -> list[SigmaStats]:
        """Effective sigma summaries for every ProbAct site (the shared one once)."""
        if self.model.shared_sigma is not None:
            return [SigmaStats.of(epoch, SHARED_SIGMA_NAME, self.model.shared_sigma.data)]
        return [
            SigmaStats.of(epoch, name, site.sigma())
            for name, site in self.model.named_probact_sites().items()
        ]

    def train_epoch(self, epoch: int) -> tuple[float, float, int]:
        """One pass over the training set; returns mean loss, accuracy and step count.

        Raises:
            TrainingDivergedError: On a non-finite value, with epoch and batch.
        """
        config = self.config
        total_loss, correct, seen, steps = 0.0, 0, 0, 0
        batch_norm = self.model.has_batch_norm()
        for index, batch in enumerate(
            batches(self.train_set, config.training.batch_size, config.seeds.shuffle, epoch)
        ):
            if batch_norm and len(batch.labels) < 2:
                self.log.debug("Skipping single-sample batch", epoch=epoch, batch=index)
                continue
            ctx = ForwardContext(
                training=True, step=self.global_step, noise_seed=config.seeds.noise
            )
            self.model.zero_grad()
            try:
                with Tape() as tape:
                    logits = self.model(batch.images, ctx)
                    loss = softmax_cross_entropy(logits, batch.labels)
                tape.backward(loss)
                for name, param in self.optimizer.params.items():
                    check_finite(param.grad, f"gradient of {name}")
                self.optimizer.step()
            except NumericError as e:
                self.log.error("Training diverged", epoch=epoch, batch=index, error=str(e))
                raise TrainingDivergedError(str(e), epoch, index) from e

            self.global_step += 1
            steps += 1
            total_loss += float(loss.data) * len(batch.labels)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            seen += len(batch.labels)
        seen = max(seen, 1)
        return total_loss / seen, 100.0 * correct / seen, steps

    def run(self) -> RunMetrics:
        """Train for the configured epochs, then write every output file."""
        config = self.config
        result = RunMetrics(config=config, sigma=self.sigma_stats(0))
        self.log.info("Training started", epochs=config.training.epochs)

        for epoch in range(1, config.training.epochs + 1):
            lr = self.optimizer.set_epoch(epoch - 1)
            started = time.perf_counter()
            train_loss, train_acc, steps = self.train_epoch(epoch)
            train_seconds = time.perf_counter() - started

            started = time.perf_counter()
            test_loss, test_acc = evaluate_model(
                self.model,
                self.test_set,
                config.eval_mode,
                noise_seed=config.seeds.noise,
                batch_size=config.training.eval_batch_size,
            )
            test_seconds = time.perf_counter() - started

            if not np.isfinite([train_loss, test_loss]).all():
                raise TrainingDivergedError("Non-finite epoch loss", epoch, steps)

            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=train_loss,
                train_accuracy=train_acc,
                test_loss=test_loss,
                test_accuracy=test_acc,
                gamma=gamma(train_acc, test_acc),
            )
            sigma = self.sigma_stats(epoch)
            result.epochs.append(record)
            result.timing.append(EpochTiming(epoch, train_seconds, test_seconds))
            result.sigma.extend(sigma)
            self.metrics.record_epoch(
                epoch,
                train_loss,
                train_acc,
                test_loss,
                test_acc,
                steps,
                train_seconds,
                test_seconds,
                {s.site: s.mean for s in sigma},
            )
            self.log.info(
                "Epoch finished",
                epoch=epoch,
                lr=lr,
                train_loss=round(train_loss, 4),
                train_accuracy=round(train_acc, 2),
                test_accuracy=round(test_acc, 2),
                gamma=round(record.gamma, 2),
                sigma_mean=[round(s.mean, 4) for s in sigma] or None,
            )

        self.save(result)
        self.log.info(
            "Run finished",
            run_dir=str(self.run_dir),
            train_accuracy=result.final.train_accuracy,
            test_accuracy=result.final.test_accuracy,
            gamma=result.gamma,
        )
        return result

    def save(self, result: RunMetrics) -> None:
        """Write checkpoint, metrics files, sigma trajectory and the Prometheus textfile."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = Checkpoint.from_model(
            self.model,
            self.optimizer.export_state(),
            epoch=len(result.epochs),
            global_step=self.global_step,
            seeds=self.config.seeds,
            eval_mode=self.config.eval_mode,
        )
        path = checkpoint.save(self.run_dir / CHECKPOINT_FILE)
        self.log.info("Checkpoint written", path=str(path))
        result.write(self.run_dir)
        activation = self.config.activation
        if activation.kind == ActivationKind.PROBACT and activation.probact.trainable:
            export_sigma_trajectory(result, self.run_dir / SIGMA_TRAJECTORY_FILE)
        if self.config.service.metrics.enabled:
            self.metrics.write(self.run_dir / PROM_FILE)


def run_training(
    config: RunConfig, datasets: tuple[Dataset, Dataset] | None = None
) -> RunMetrics:
    """Train one configuration and write its outputs to ``config.run_dir``."""
    return Trainer(config, datasets).run()


def _as_checkpoint(checkpoint: Checkpoint | str | Path) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def evaluate(
    checkpoint: Checkpoint | str | Path,
    dataset: Dataset,
    eval_mode: EvalMode | str | None = None,
    repeat: int = 0,
    batch_size: int = 1000,
) -> float:
    """Top-1 accuracy (percent) of a checkpoint on ``dataset``.

    ``repeat`` selects a fresh block of noise keys for stochastic and mc modes.

    Raises:
        CheckpointError: If the dataset does not fit the checkpointed model.
    """
    checkpoint = _as_checkpoint(checkpoint)
    if isinstance(eval_mode, str):
        eval_mode = EvalMode.model_validate(eval_mode)
    eval_mode = eval_mode or checkpoint.meta.eval_mode
    meta = checkpoint.meta
    if dataset.image_shape != tuple(meta.input_shape):
        raise CheckpointError(
            f"Dataset images {list(dataset.image_shape)} do not fit model input "
            f"{list(meta.input_shape)}"
        )
    if dataset.num_classes != meta.num_classes:
        raise CheckpointError(
            f"Dataset has {dataset.num_classes} classes, model has {meta.num_classes}"
        )
    model = checkpoint.build_model()
    _, accuracy = evaluate_model(
        model,
        dataset,
        eval_mode,
        noise_seed=meta.seeds.noise,
        batch_size=batch_size,
        repeat=repeat,
    )
    logger.info("Evaluated", eval_mode=str(eval_mode), repeat=repeat, accuracy=accuracy)
    return accuracy


def swap_activation(
    checkpoint: Checkpoint | str | Path, out: str | Path | None = None
) -> Checkpoint:
    """Replace every ProbAct site of a checkpoint with ReLU, keeping all weights.

    Raises:
        UsageError: If the checkpoint was not trained with ProbAct.
    """
    checkpoint = _as_checkpoint(checkpoint)
    meta = checkpoint.meta
    if meta.activation.kind != ActivationKind.PROBACT:
        raise UsageError(f"Checkpoint uses '{meta.activation.label}', not ProbAct")

    swapped_meta = meta.model_copy(
        update={"activation": ActivationConfig(kind=ActivationKind.RELU)}
    )
    original = checkpoint.build_model()
    probact_keys = {
        f"param.{name}"
        for name, param in original.named_parameters().items()
        if name == SHARED_SIGMA_NAME
        or any(param is site.parameter for site in original.probact_sites())
    }
    state = {k: v for k, v in checkpoint.state.items() if k not in probact_keys}
    swapped = Checkpoint(meta=swapped_meta, state=state)
    swapped.build_model()  # validates the remaining state
    if out is not None:
        swapped.save(out)
        logger.info("Swapped checkpoint written", path=str(out), removed=len(probact_keys))
    return swapped
