"""Unit tests for the configuration management system.

The suite covers loading YAML and JSON files, defaults, validation of every
section, command-line overrides and writing the effective configuration.

Example:
    ```python
    # Running a specific test
    pytest tests/unit/test_config.py::test_load_valid_config -v
    ```
"""

import json
from pathlib import Path
from typing import Any, Dict
from unittest.mock import patch

import pytest

from lfr_tabular.config import (
    BBTSettings,
    ConfigManager,
    DatasetSettings,
    LoggingSettings,
    ModelSettings,
    OptimizerSettings,
    RunConfig,
    TrainConfig,
    TrainSettings,
    apply_overrides,
    config_reference,
    dump_config,
    parse_override,
)
from lfr_tabular.errors import ConfigError


def test_load_valid_config(tiny_config_file: Path) -> None:
    """Test loading a valid YAML configuration file.

    Args:
        tiny_config_file: Path to a temporary configuration file with valid data
    """
    config_manager = ConfigManager(str(tiny_config_file))
    assert config_manager.train.K == 2
    assert config_manager.config.model.latent_dim == 8
    assert config_manager.dataset.synthetic.n == 120
    assert config_manager.probe.max_iter == 200
    assert config_manager.logging.level == "DEBUG"


def test_load_json_config(tmp_path: Path, tiny_config_data: Dict[str, Any]) -> None:
    """JSON files load through the same reader."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config_data))
    assert ConfigManager(str(path)).train.N == 6


def test_load_nonexistent_config(tmp_path: Path) -> None:
    """Test loading a non-existent configuration file."""
    with pytest.raises(ConfigError) as exc_info:
        ConfigManager(str(tmp_path / "nonexistent.yaml"))
    assert "Configuration file not found" in str(exc_info.value)


def test_load_empty_config(tmp_path: Path) -> None:
    """Test loading an empty configuration file."""
    config_path = tmp_path / "empty.yaml"
    config_path.touch()
    with pytest.raises(ConfigError) as exc_info:
        ConfigManager(str(config_path))
    assert "Empty configuration file" in str(exc_info.value)


def test_load_invalid_yaml(tmp_path: Path) -> None:
    """Test loading a file that is not valid YAML."""
    config_path = tmp_path / "invalid.yaml"
    config_path.write_text("invalid: yaml: content: [")
    with pytest.raises(ConfigError) as exc_info:
        ConfigManager(str(config_path))
    assert "Failed to load configuration" in str(exc_info.value)


def test_unknown_key_rejected(tmp_path: Path) -> None:
    """Typos in section keys fail validation."""
    config_path = tmp_path / "typo.yaml"
    config_path.write_text("train:\n  batchsize: 64\n")
    with pytest.raises(ConfigError) as exc_info:
        ConfigManager(str(config_path))
    assert exc_info.value.exit_code == 1
    assert "train.batchsize" in str(exc_info.value)


def test_all_errors_reported_together(tmp_path: Path) -> None:
    config_path = tmp_path / "bad.yaml"
    config_path.write_text("train:\n  K: 0\n  batch_size: 1\n")
    with pytest.raises(ConfigError) as exc_info:
        ConfigManager(str(config_path))
    assert "train.K" in str(exc_info.value)
    assert "train.batch_size" in str(exc_info.value)


def test_default_values() -> None:
    """Test that default values are used when not specified in config."""
    config = RunConfig()
    assert config.train.K == 6
    assert config.candidate_count == 60
    assert config.train.batch_size == 128
    assert config.model.latent_dim == 256
    assert config.model.encoder_depth == 4
    assert config.bbt.lambda_offdiag == 0.005
    assert config.selection.strategy == "dpp"
    assert config.runtime.deterministic
    assert config.probe_size == 128


def test_defaults_without_file() -> None:
    config_manager = ConfigManager(None, overrides=["train.seed=42"])
    assert config_manager.config_path is None
    assert config_manager.train.seed == 42


class TestValidation:
    """Field and cross-field validation."""

    def test_candidate_count_below_k(self) -> None:
        with pytest.raises(ValueError, match="must be >= train.K"):
            TrainConfig(train=TrainSettings(K=4, N=3))

    def test_projector_dims_length(self) -> None:
        with pytest.raises(ValueError, match="projector_dims"):
            TrainConfig(
                train=TrainSettings(K=2), model=ModelSettings(projector_dims=[4, 4, 4])
            )

    def test_projector_dims_positive(self) -> None:
        with pytest.raises(ValueError, match="positive"):
            ModelSettings(projector_dims=[4, 0])

    def test_projector_dim_lookup(self) -> None:
        cfg = TrainConfig(train=TrainSettings(K=2), model=ModelSettings(projector_dims=[3, 7]))
        assert [cfg.projector_dim(k) for k in range(2)] == [3, 7]
        assert TrainConfig().projector_dim(0) == 256

    def test_betas(self) -> None:
        with pytest.raises(ValueError, match="betas"):
            OptimizerSettings(betas=(0.9, 1.0))

    def test_negative_lambda(self) -> None:
        with pytest.raises(ValueError):
            BBTSettings(lambda_offdiag=-0.1)

    def test_csv_needs_path_and_schema(self) -> None:
        with pytest.raises(ValueError, match="train_path"):
            DatasetSettings(kind="csv")
        with pytest.raises(ValueError, match="columns"):
            DatasetSettings(kind="csv", train_path="train.csv")
        assert DatasetSettings(kind="csv", recipe="adult_income", train_path="a.data")

    def test_logging_settings(self) -> None:
        with pytest.raises(ValueError, match="Unsupported logging level"):
            LoggingSettings(level="INVALID")
        with pytest.raises(ValueError, match="max_size"):
            LoggingSettings(max_size=512)
        assert LoggingSettings(level="debug").level == "DEBUG"


class TestOverrides:
    """`section.key=value` overrides."""

    @pytest.mark.parametrize(
        "override, keys, value",
        [
            ("train.K=3", ["train", "K"], 3),
            ("optimizer.lr=1e-3", ["optimizer", "lr"], 1e-3),
            ("runtime.deterministic=false", ["runtime", "deterministic"], False),
            ("model.projector_dims=[2, 4]", ["model", "projector_dims"], [2, 4]),
            ("output.directory=runs/x", ["output", "directory"], "runs/x"),
        ],
    )
    def test_parse(self, override: str, keys: list, value: Any) -> None:
        assert parse_override(override) == (keys, value)

    def test_missing_equals(self) -> None:
        with pytest.raises(ConfigError, match="Invalid override"):
            parse_override("train.K")

    def test_nested_sections_created(self) -> None:
        data = apply_overrides({}, ["dataset.synthetic.n=50"])
        assert data == {"dataset": {"synthetic": {"n": 50}}}

    def test_flags_win_over_file(self, tiny_config_file: Path) -> None:
        config_manager = ConfigManager(str(tiny_config_file), overrides=["train.K=3"])
        assert config_manager.train.K == 3
        assert config_manager.train.N == 6


def test_save_effective_round_trip(tmp_path: Path, tiny_config_file: Path) -> None:
    """The effective JSON file reloads to the same configuration."""
    config_manager = ConfigManager(str(tiny_config_file), overrides=["train.seed=9"])
    path = config_manager.save_effective(tmp_path / "run" / "effective.json")
    reloaded = ConfigManager(str(path))
    assert reloaded.config == config_manager.config
    assert path.read_text() == dump_config(config_manager.config)


def test_save_effective_error(tmp_path: Path, tiny_config_file: Path) -> None:
    """Test error handling when saving configuration."""
    config_manager = ConfigManager(str(tiny_config_file))
    with patch("pathlib.Path.write_text", side_effect=IOError("Permission denied")):
        with pytest.raises(ConfigError) as exc_info:
            config_manager.save_effective(tmp_path / "effective.json")
        assert "Failed to save configuration" in str(exc_info.value)


def test_config_reference_lists_defaults() -> None:
    reference = json.loads(config_reference())
    assert reference["train"]["K"] == 6
    assert reference["init"]["scheme"] == "default_uniform"
    assert set(reference) >= {"train", "model", "dataset", "probe", "output", "logging"}
