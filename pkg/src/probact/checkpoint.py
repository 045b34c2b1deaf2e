"""Versioned checkpoint container.

A checkpoint is an ``.npz`` archive (no pickled objects) holding a JSON
``meta`` record plus flat arrays: ``param.<name>``, ``buffer.<name>`` and the
optimizer's ``optim.*`` entries. See docs/checkpoint-format.md.
"""

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import structlog
from pydantic import BaseModel, Field, ValidationError

from .config import ActivationConfig, EvalMode, ModelSpec, SeedConfig
from .errors import CheckpointError
from .models import Model, build_model

logger = structlog.get_logger()

FORMAT_NAME = "probact-checkpoint"
FORMAT_VERSION = 1


class CheckpointMeta(BaseModel):
    """Everything needed to rebuild the model a checkpoint belongs to."""

    format: Literal["probact-checkpoint"] = Field(default=FORMAT_NAME)
    version: int = Field(default=FORMAT_VERSION, description="Layout version")
    model: ModelSpec
    activation: ActivationConfig
    num_classes: int = Field(..., ge=1)
    input_shape: tuple[int, int, int]
    dropout_p: float | None = None
    precision: Literal["float32", "float64"] = "float32"
    epoch: int = Field(default=0, ge=0, description="Epochs completed")
    global_step: int = Field(default=0, ge=0, description="Minibatches completed")
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    eval_mode: EvalMode = Field(default_factory=EvalMode)


@dataclass
class Checkpoint:
    """In-memory checkpoint."""

    meta: CheckpointMeta
    state: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls,
        model: Model,
        optimizer_state: dict[str, np.ndarray] | None = None,
        *,
        epoch: int = 0,
        global_step: int = 0,
        seeds: SeedConfig | None = None,
        eval_mode: EvalMode | None = None,
    ) -> "Checkpoint":
        meta = CheckpointMeta(
            model=model.spec,
            activation=model.activation,
            num_classes=model.num_classes,
            input_shape=model.input_shape,
            dropout_p=model.dropout_p,
            precision=str(model.dtype),
            epoch=epoch,
            global_step=global_step,
            seeds=seeds or SeedConfig(),
            eval_mode=eval_mode or EvalMode(),
        )
        return cls(meta=meta, state=model.state_dict(), optimizer=dict(optimizer_state or {}))

    def build_model(self) -> Model:
        """Rebuild the network and load the stored parameters and buffers.

        Raises:
            CheckpointError: If the stored state does not fit the stored spec.
        """
        model = build_model(
            self.meta.model,
            self.meta.activation,
            self.meta.num_classes,
            input_shape=self.meta.input_shape,
            dropout_p=self.meta.dropout_p,
            dtype=np.dtype(self.meta.precision),
        )
        model.load_state_dict(self.state)
        return model

    def save(self, path: str | Path) -> Path:
        """Write the archive to ``path`` (written as given, no suffix added)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = np.frombuffer(self.meta.model_dump_json().encode(), dtype=np.uint8)
        arrays = {"meta": meta, **self.state, **self.optimizer}
        with path.open("wb") as f:
            np.savez(f, **arrays)
        logger.debug("Checkpoint written", path=str(path), arrays=len(arrays))
        return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint archive.

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointError: If the file is not a readable checkpoint of a known
            layout version.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    raw_meta = arrays.pop("meta", None)
    if raw_meta is None:
        raise CheckpointError(f"Checkpoint {path} has no meta record")
    try:
        meta_data = json.loads(raw_meta.tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint {path} has a corrupt meta record") from e
    if meta_data.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a probact checkpoint")
    if meta_data.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint layout version {meta_data.get('version')} "
            f"(expected {FORMAT_VERSION})"
        )
    try:
        meta = CheckpointMeta.model_validate(meta_data)
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint meta record: {e}") from e

    state = {k: v for k, v in arrays.items() if k.startswith(("param.", "buffer."))}
    optimizer = {k: v for k, v in arrays.items() if k.startswith("optim.")}
    unknown = set(arrays) - set(state) - set(optimizer)
    if unknown:
        raise CheckpointError(f"Unknown checkpoint entries: {sorted(unknown)}")
    return Checkpoint(meta=meta, state=state, optimizer=optimizer)
