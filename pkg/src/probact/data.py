"""Dataset ingestion, subsetting and batching."""

from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import structlog

from .config import DatasetConfig, DatasetKind
from .errors import DatasetFormatError

logger = structlog.get_logger()

CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32

# variant -> (label bytes per record, label byte used, sub-directory, train files, test files)
CIFAR_LAYOUTS: dict[str, tuple[int, int, str, tuple[str, ...], tuple[str, ...]]] = {
    "cifar10": (
        1,
        0,
        "cifar-10-batches-bin",
        tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        ("test_batch.bin",),
    ),
    # Fine label (second byte)
    "cifar100": (2, 1, "cifar-100-binary", ("train.bin",), ("test.bin",)),
}

SPIRAL_TURNS = 2.0
BLOB_RADIUS = 3.0


@dataclass(frozen=True)
class Dataset:
    """Images N×C×H×W with integer labels below ``num_classes``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"Images must be N×C×H×W, got shape {list(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"Labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def normalize_unit(pixels: np.ndarray, dtype: np.dtype | type = np.float32) -> np.ndarray:
    """Map raw bytes 0..255 onto [0, 1]."""
    return (np.asarray(pixels, dtype=np.float64) / 255.0).astype(dtype)


def _cifar_file(root: Path, subdir: str, name: str) -> Path:
    for candidate in (root / name, root / subdir / name):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"CIFAR file '{name}' not found under {root}")


def read_cifar_records(
    path: Path, label_bytes: int, label_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Raw pixel bytes (N×3×32×32 uint8) and labels of one binary file.

    Raises:
        DatasetFormatError: If the file size is not a whole number of records.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + CIFAR_PIXELS
    if raw.size == 0 or raw.size % record:
        offset = raw.size - raw.size % record
        raise DatasetFormatError(
            f"{path.name}: truncated record ({raw.size % record} of {record} bytes)"
            if raw.size
            else f"{path.name}: empty file",
            offset=offset,
        )
    rows = raw.reshape(-1, record)
    labels = rows[:, label_index].astype(np.int64)
    pixels = rows[:, label_bytes:].reshape(-1, *CIFAR_IMAGE_SHAPE)
    return pixels, labels


def load_cifar(
    path: str | Path,
    variant: Literal["cifar10", "cifar100"] = "cifar10",
    split: Literal["train", "test"] = "train",
    dtype: np.dtype | type = np.float32,
) -> Dataset:
    """Load a CIFAR split from the standard binary layout, normalized to [0, 1].

    ``path`` may point at the extracted archive directory or its parent.

    Raises:
        FileNotFoundError: If a split file is missing.
        DatasetFormatError: On a truncated or odd-sized file (with byte offset).
    """
    if variant not in CIFAR_LAYOUTS:
        raise ValueError(f"Unknown CIFAR variant '{variant}'. Valid: cifar10, cifar100")
    if split not in ("train", "test"):
        raise ValueError(f"Unknown split '{split}'. Valid: train, test")
    label_bytes, label_index, subdir, train_files, test_files = CIFAR_LAYOUTS[variant]
    root = Path(path)

    pixel_parts, label_parts = [], []
    for name in train_files if split == "train" else test_files:
        source = _cifar_file(root, subdir, name)
        pixels, labels = read_cifar_records(source, label_bytes, label_index)
        pixel_parts.append(pixels)
        label_parts.append(labels)

    num_classes = 10 if variant == "cifar10" else 100
    dataset = Dataset(
        normalize_unit(np.concatenate(pixel_parts), dtype),
        np.concatenate(label_parts),
        num_classes,
    )
    logger.info("Dataset loaded", variant=variant, split=split, images=len(dataset))
    return dataset


def stratified_indices(
    labels: np.ndarray, num_classes: int, fraction: float, seed: int
) -> np.ndarray:
    """Sorted indices of a class-balanced random subset.

    Every class contributes floor(fraction · smallest class count) samples.

    Raises:
        ValueError: If fraction is not in (0, 1].
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"Subset fraction must be in (0, 1], got {fraction}")
    counts = np.bincount(labels, minlength=num_classes)
    per_class = int(np.floor(fraction * counts.min() + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = [
        rng.choice(np.flatnonzero(labels == c), size=per_class, replace=False)
        for c in range(num_classes)
    ]
    return np.sort(np.concatenate(chosen))


def stratified_subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Class-balanced subset; the full dataset when fraction is 1."""
    if fraction == 1.0 and len(set(dataset.class_counts())) == 1:
        return dataset
    return dataset.subset(stratified_indices(dataset.labels, dataset.num_classes, fraction, seed))


def synthetic_dataset(
    kind: Literal["blobs", "spirals"],
    n: int,
    classes: int,
    noise: float,
    seed: int,
    resolution: int = 1,
    dtype: np.dtype | type = np.float32,
) -> Dataset:
    """Balanced labeled 2-D points lifted to 2×r×r images.

    Blobs are Gaussian clusters with centres evenly spaced on a circle;
    spirals are interleaved arms of two turns. Each coordinate is repeated
    over an r×r grid so convolutional specs can run on the set.

    Raises:
        ValueError: If n is not divisible by classes.
    """
    if classes < 2:
        raise ValueError(f"Need at least 2 classes, got {classes}")
    if n % classes:
        raise ValueError(f"n ({n}) must be divisible by classes ({classes})")
    if resolution < 1:
        raise ValueError(f"Resolution must be positive, got {resolution}")

    rng = np.random.default_rng(seed)
    per_class = n // classes
    labels = np.repeat(np.arange(classes), per_class)

    if kind == "blobs":
        angles = 2 * np.pi * np.arange(classes) / classes
        centres = BLOB_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        points = centres[labels] + noise * rng.standard_normal((n, 2))
    elif kind == "spirals":
        radius = np.tile(np.linspace(0.0, 1.0, per_class + 1)[1:], classes)
        theta = (
            SPIRAL_TURNS * 2 * np.pi * radius
            + 2 * np.pi * labels / classes
            + noise * rng.standard_normal(n)
        )
        points = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    else:
        raise ValueError(f"Unknown synthetic dataset '{kind}'. Valid: blobs, spirals")

    images = np.broadcast_to(points[:, :, None, None], (n, 2, resolution, resolution))
    return Dataset(np.ascontiguousarray(images, dtype=dtype), labels.astype(np.int64), classes)


def batches(
    dataset: Dataset, batch_size: int, shuffle_seed: int | None, epoch: int = 0
) -> Iterator[Batch]:
    """Minibatches in an order fixed by (shuffle_seed, epoch); last batch may be short.

    ``shuffle_seed=None`` keeps the stored order.
    """
    if batch_size < 1:
        raise ValueError(f"Batch size must be positive, got {batch_size}")
    if shuffle_seed is None:
        order = np.arange(len(dataset))
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx], idx)


def load_dataset(
    config: DatasetConfig, dtype: np.dtype | type = np.float32
) -> tuple[Dataset, Dataset]:
    """Train and test sets for a dataset config (subset not applied)."""
    if config.synthetic:
        train = synthetic_dataset(
            config.kind.value,
            config.n_train,
            config.classes,
            config.noise,
            config.seed,
            config.resolution,
            dtype,
        )
        # Offset seed: test points are fresh draws of the same distribution
        test = synthetic_dataset(
            config.kind.value,
            config.n_test,
            config.classes,
            config.noise,
            config.seed + 1,
            config.resolution,
            dtype,
        )
        logger.info(
            "Dataset generated", kind=config.kind.value, train=len(train), test=len(test)
        )
        return train, test
    if config.path is None:
        raise FileNotFoundError(
            f"Dataset '{config.kind.value}' needs a directory (--dataset-dir or dataset.path)"
        )
    variant = "cifar10" if config.kind == DatasetKind.CIFAR10 else "cifar100"
    return (
        load_cifar(config.path, variant, "train", dtype),
        load_cifar(config.path, variant, "test", dtype),
    )
