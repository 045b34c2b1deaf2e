"""Prometheus metrics for probact training runs.

Each run gets its own registry so that runs executed side by side in one
process (suites) never share series. The registry is written as a
node-exporter textfile next to the other run outputs.
"""

from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile


class TrainingMetrics:
    """Metric families of one training run."""

    def __init__(self, run: str, activation: str) -> None:
        self.registry = CollectorRegistry()
        self.labels = {"run": run, "activation": activation}
        names = list(self.labels)

        # Progress
        self.epoch = Gauge(
            "probact_epoch",
            "Number of completed training epochs",
            names,
            registry=self.registry,
        )
        self.optimizer_steps = Counter(
            "probact_optimizer_steps",
            "Total number of optimizer updates",
            names,
            registry=self.registry,
        )

        # Quality
        self.loss = Gauge(
            "probact_loss",
            "Mean softmax cross-entropy of the last epoch",
            [*names, "split"],
            registry=self.registry,
        )
        self.accuracy = Gauge(
            "probact_accuracy_percent",
            "Top-1 accuracy of the last epoch",
            [*names, "split"],
            registry=self.registry,
        )
        self.gamma = Gauge(
            "probact_gamma_percent",
            "Train minus test accuracy of the last epoch",
            names,
            registry=self.registry,
        )

        # Perturbation scale
        self.sigma_mean = Gauge(
            "probact_sigma_mean",
            "Mean effective sigma per ProbAct site",
            [*names, "site"],
            registry=self.registry,
        )

        # Timing
        self.epoch_seconds = Histogram(
            "probact_epoch_seconds",
            "Wall-clock time per epoch phase",
            [*names, "phase"],
            buckets=(0.1, 0.5, 1, 5, 10, 30, 60, 300, 900),
            registry=self.registry,
        )

    def record_epoch(
        self,
        epoch: int,
        train_loss: float,
        train_accuracy: float,
        test_loss: float,
        test_accuracy: float,
        steps: int,
        train_seconds: float,
        test_seconds: float,
        sigma_means: dict[str, float],
    ) -> None:
        labels = self.labels
        self.epoch.labels(**labels).set(epoch)
        self.optimizer_steps.labels(**labels).inc(steps)
        self.loss.labels(**labels, split="train").set(train_loss)
        self.loss.labels(**labels, split="test").set(test_loss)
        self.accuracy.labels(**labels, split="train").set(train_accuracy)
        self.accuracy.labels(**labels, split="test").set(test_accuracy)
        self.gamma.labels(**labels).set(train_accuracy - test_accuracy)
        self.epoch_seconds.labels(**labels, phase="train").observe(train_seconds)
        self.epoch_seconds.labels(**labels, phase="test").observe(test_seconds)
        for site, value in sigma_means.items():
            self.sigma_mean.labels(**labels, site=site).set(value)

    def write(self, path: Path) -> None:
        """Write the registry in the Prometheus text format."""
        write_to_textfile(str(path), self.registry)
