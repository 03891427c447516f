"""Shared pytest fixtures for the test suite."""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Generator, Tuple

import numpy as np
import pytest
from ruamel.yaml import YAML

from lfr_tabular.config import ConfigManager, RunConfig
from lfr_tabular.data import Dataset, make_synthetic_clusters
from lfr_tabular.tensor import current_tape


def pytest_collection_modifyitems(config: pytest.Config, items: list) -> None:
    """Skip `dataset` tests unless the Adult files are available."""
    if os.environ.get("LFR_ADULT_DIR"):
        return
    skip = pytest.mark.skip(reason="set LFR_ADULT_DIR to run dataset tests")
    for item in items:
        if "dataset" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def clean_tape() -> Generator[None, None, None]:
    """Start and end every test with an empty gradient tape."""
    current_tape().clear()
    yield
    current_tape().clear()


@pytest.fixture
def tiny_config_data(tmp_path: Path) -> Dict[str, Any]:
    """A configuration small enough to train in well under a second.

    Args:
        tmp_path: Pytest fixture for a temporary path.

    Returns:
        Raw configuration mapping.
    """
    return {
        "train": {
            "K": 2,
            "N": 6,
            "batch_size": 16,
            "train_epochs": 2,
            "predictor_epochs": 1,
            "seed": 3,
        },
        "model": {
            "latent_dim": 8,
            "encoder_hidden": 16,
            "encoder_depth": 2,
            "projector_hidden": 16,
            "projector_depth": 2,
        },
        "optimizer": {"lr": 1e-3},
        "dataset": {
            "kind": "synthetic",
            "synthetic": {"n": 120, "d_signal": 4, "d_noise": 2, "classes": 3, "sep": 3.0},
        },
        "probe": {"max_iter": 200},
        "output": {"directory": str(tmp_path / "run")},
        "logging": {"file": str(tmp_path / "logs" / "lfr.log"), "level": "DEBUG"},
    }


@pytest.fixture
def tiny_config(tiny_config_data: Dict[str, Any]) -> RunConfig:
    """Validated tiny configuration."""
    return RunConfig(**tiny_config_data)


@pytest.fixture
def tiny_config_file(tmp_path: Path, tiny_config_data: Dict[str, Any]) -> Path:
    """The tiny configuration written as YAML.

    Returns:
        Path to the configuration file.
    """
    path = tmp_path / "config.yaml"
    yaml = YAML(typ="safe")
    yaml.default_flow_style = False
    with path.open("w", encoding="utf-8") as f:
        yaml.dump(tiny_config_data, f)
    return path


@pytest.fixture
def tiny_config_manager(tiny_config_file: Path) -> ConfigManager:
    """ConfigManager loaded from the tiny configuration file."""
    return ConfigManager(str(tiny_config_file))


@pytest.fixture
def synthetic_splits() -> Tuple[Dataset, Dataset]:
    """Small three-class synthetic train/test splits (90/30 rows, 6 features)."""
    return make_synthetic_clusters(n=120, d_signal=4, d_noise=2, classes=3, sep=3.0, seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    """Deterministic generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def quiet_logging() -> Generator[None, None, None]:
    """Silence logging for tests that produce a lot of it."""
    previous = logging.root.manager.disable
    logging.disable(logging.CRITICAL)
    yield
    logging.disable(previous)
