"""Shared fixtures."""

import numpy as np
import pytest

from probact.config import RunConfig


@pytest.fixture
def make_config(tmp_path):
    """Small synthetic run config; keyword overrides replace top-level keys."""

    def factory(**overrides) -> RunConfig:
        data = {
            "name": "tiny",
            "model": "mlp",
            "dataset": {"kind": "blobs", "n_train": 256, "n_test": 128, "resolution": 1},
            "training": {"epochs": 2, "batch_size": 32},
        }
        data.update(overrides)
        data.setdefault("output_dir", tmp_path / data["name"])
        return RunConfig.model_validate(data)

    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
