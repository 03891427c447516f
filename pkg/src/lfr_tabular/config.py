"""Configuration management for lfr-tabular runs.

Run configurations are validated with Pydantic models and loaded from disk
with ruamel.yaml. Because JSON is a subset of YAML, the same loader accepts
both the JSON run files written by `save_effective` and hand-written YAML.

The configuration is organized into sections:
- train: projector counts, batch size, epochs, alternation mode, seed
- model: encoder / projector / predictor widths and depths
- optimizer: Adam or SGD settings shared by the encoder and predictor phases
- init: projector initialization scheme
- bbt: Batch-wise Barlow Twins loss settings
- selection: diverse projector selection settings
- dataset: CSV or synthetic data source
- probe: logistic-regression probe settings
- output, logging, runtime: run directory, log handling, threading

Every model forbids unknown keys so that typos fail loudly.

Example:
    ```python
    config_manager = ConfigManager("run.yaml", overrides=["train.train_epochs=5"])
    print(config_manager.train.batch_size)
    ```
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from lfr_tabular.errors import ConfigError

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    """Base model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid")


class TrainSettings(StrictModel):
    """Settings of the alternating training loop.

    Attributes:
        K: Number of random projectors kept for training.
        N: Number of candidate projectors; defaults to
            `selection.candidate_multiplier * K` when omitted.
        batch_size: Mini-batch size m (the cosine matrix is m x m).
        train_epochs: Number of outer epochs.
        predictor_epochs: Predictor passes M per outer epoch.
        seed: Run seed every random stream is derived from.
        eval_every: Probe and checkpoint every this many epochs (0 disables).
        alternation: `epoch` (full encoder epoch then M predictor epochs),
            `batch` (alternate per mini-batch) or `joint` (update both at once).
        max_steps: Optional cap on the number of encoder updates.
        reset_predictor_optimizer: Reset predictor moments each outer epoch.
    """

    K: int = Field(default=6, ge=1)
    N: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=128, ge=2)
    train_epochs: int = Field(default=100, ge=0)
    predictor_epochs: int = Field(default=1, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**63)
    eval_every: int = Field(default=0, ge=0)
    alternation: Literal["epoch", "batch", "joint"] = "epoch"
    max_steps: Optional[int] = Field(default=None, ge=1)
    reset_predictor_optimizer: bool = False


class ModelSettings(StrictModel):
    """Architecture of the encoder, projectors and predictors."""

    latent_dim: int = Field(default=256, ge=1)
    encoder_hidden: int = Field(default=256, ge=1)
    encoder_depth: int = Field(default=4, ge=1)
    projector_hidden: int = Field(default=256, ge=1)
    projector_depth: int = Field(default=2, ge=1)
    # Output width per projector; None means latent_dim for every projector.
    projector_dims: Optional[List[int]] = None
    predictor_hidden: int = Field(default=0, ge=0)

    @field_validator("projector_dims")
    @classmethod
    def validate_projector_dims(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        """Ensure every projector output width is positive."""
        if v is not None and any(d < 1 for d in v):
            raise ValueError("projector_dims entries must be positive")
        return v


class OptimizerSettings(StrictModel):
    """Optimizer settings; weight_decay realizes the L2 regularizers."""

    kind: Literal["adam", "sgd"] = "adam"
    lr: float = Field(default=1e-3, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)

    @field_validator("betas")
    @classmethod
    def validate_betas(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        """Ensure both Adam betas lie in [0, 1)."""
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v


class InitSettings(StrictModel):
    """Projector initialization scheme."""

    scheme: Literal["default_uniform", "beta", "beta_with_dropout"] = (
        "default_uniform"
    )
    dropout_rate: float = Field(default=0.4, ge=0.0, lt=1.0)


class BBTSettings(StrictModel):
    """Batch-wise Barlow Twins loss settings."""

    lambda_offdiag: float = Field(default=0.005, ge=0.0)
    eps: float = Field(default=1e-12, gt=0.0)
    reduction: Literal["sum", "mean"] = "sum"


class SelectionSettings(StrictModel):
    """Settings of candidate generation and diverse selection."""

    strategy: Literal["dpp", "random", "first"] = "dpp"
    candidate_multiplier: int = Field(default=10, ge=1)
    probe_size: Optional[int] = Field(default=None, ge=2)
    eps: float = Field(default=1e-12, gt=0.0)


class RuntimeSettings(StrictModel):
    """Threading settings; deterministic mode forces sequential execution."""

    deterministic: bool = True
    workers: int = Field(default=1, ge=1)


class ColumnSpec(StrictModel):
    """Declares one CSV column as numeric or categorical."""

    name: str
    kind: Literal["numeric", "categorical"]


class SyntheticSettings(StrictModel):
    """Parameters of the synthetic cluster benchmark."""

    n: int = Field(default=2000, ge=1)
    d_signal: int = Field(default=10, ge=1)
    d_noise: int = Field(default=10, ge=0)
    classes: int = Field(default=3, ge=2)
    sep: float = Field(default=3.0, ge=0.0)
    seed: Optional[int] = Field(default=None, ge=0)


class DatasetSettings(StrictModel):
    """Data source: a CSV pair with a schema, or the synthetic benchmark.

    Attributes:
        kind: `csv` or `synthetic`.
        recipe: Built-in CSV recipe (`adult_income`) that supplies the schema.
        train_path: Training CSV file.
        test_path: Optional test CSV file, preprocessed with train statistics.
        label_column: Name of the label column.
        columns: Feature column schema (order defines feature order).
        header: Whether the CSV files carry a header row.
        skip_test_rows: Leading junk lines to skip in the test file.
        missing_token: Placeholder treated as a missing value.
        normalize_labels: Strip whitespace and a trailing "." from labels.
        synthetic: Parameters used when kind is `synthetic`.
    """

    kind: Literal["csv", "synthetic"] = "synthetic"
    recipe: Optional[Literal["adult_income"]] = None
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    label_column: Optional[str] = None
    columns: Optional[List[ColumnSpec]] = None
    header: bool = True
    skip_test_rows: int = Field(default=0, ge=0)
    missing_token: str = "?"
    normalize_labels: bool = False
    synthetic: SyntheticSettings = Field(default_factory=SyntheticSettings)

    @model_validator(mode="after")
    def validate_source(self) -> "DatasetSettings":
        """Check that a CSV source names its files and schema."""
        if self.kind == "csv":
            if not self.train_path:
                raise ValueError("dataset.train_path is required for kind 'csv'")
            if self.recipe is None and (not self.columns or not self.label_column):
                raise ValueError(
                    "dataset.columns and dataset.label_column are required "
                    "for kind 'csv' without a recipe"
                )
        return self


class ProbeSettings(StrictModel):
    """Logistic-regression probe settings."""

    l2: float = Field(default=1e-4, ge=0.0)
    max_iter: int = Field(default=2000, ge=1)
    tol: float = Field(default=1e-5, gt=0.0)
    seeds: int = Field(default=1, ge=1)
    chunk_size: int = Field(default=1024, ge=1)
    init_scale: float = Field(default=0.01, ge=0.0)


class OutputSettings(StrictModel):
    """Run directory layout."""

    directory: str = "runs/lfr"
    checkpoint_name: str = "checkpoint.lfr"

    @field_validator("directory", "checkpoint_name")
    @classmethod
    def validate_non_empty(cls, v: str) -> str:
        """Ensure path components are non-empty strings."""
        if not v:
            raise ValueError("output paths must be non-empty strings")
        return v


class LoggingSettings(StrictModel):
    """Logging configuration settings.

    Attributes:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        format: Log message format string
        file: Log file path
        max_size: Maximum log file size in bytes
        backup_count: Number of backup log files to keep
    """

    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: str = "lfr.log"
    max_size: int = Field(default=10485760, ge=1024)  # 10MB
    backup_count: int = Field(default=5, ge=1)

    @field_validator("level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        """Validate the logging level.

        Args:
            v: The level string to validate

        Returns:
            The validated, upper-cased level string

        Raises:
            ValueError: If the level is not supported
        """
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Unsupported logging level: {v}")
        return v.upper()


class TrainConfig(StrictModel):
    """All hyperparameters of candidate selection and alternating training."""

    train: TrainSettings = Field(default_factory=TrainSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    init: InitSettings = Field(default_factory=InitSettings)
    bbt: BBTSettings = Field(default_factory=BBTSettings)
    selection: SelectionSettings = Field(default_factory=SelectionSettings)
    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)

    @model_validator(mode="after")
    def validate_counts(self) -> "TrainConfig":
        """Check N >= K and that projector_dims has one entry per projector."""
        if self.candidate_count < self.train.K:
            raise ValueError(
                f"train.N ({self.candidate_count}) must be >= train.K "
                f"({self.train.K})"
            )
        dims = self.model.projector_dims
        if dims is not None and len(dims) != self.train.K:
            raise ValueError(
                f"model.projector_dims has {len(dims)} entries, expected "
                f"train.K = {self.train.K}"
            )
        return self

    @property
    def candidate_count(self) -> int:
        """Number of candidate projectors N (defaults to multiplier * K)."""
        if self.train.N is not None:
            return self.train.N
        return self.selection.candidate_multiplier * self.train.K

    @property
    def probe_size(self) -> int:
        """Rows in the probe batch used for projector signatures."""
        return self.selection.probe_size or self.train.batch_size

    def projector_dim(self, k: int) -> int:
        """Output width of the k-th selected projector."""
        if self.model.projector_dims is not None:
            return self.model.projector_dims[k]
        return self.model.latent_dim


class RunConfig(TrainConfig):
    """Root configuration of a command: training plus data, probe and output."""

    dataset: DatasetSettings = Field(default_factory=DatasetSettings)
    probe: ProbeSettings = Field(default_factory=ProbeSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)


def _format_validation_error(error: ValidationError) -> str:
    """Render every validation failure of a config on its own line."""
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def parse_override(override: str) -> Tuple[List[str], Any]:
    """Split a `section.key=value` override into a key path and a value.

    The value is parsed as a YAML scalar, so `3`, `1e-3`, `true` and
    `[1, 2]` become int, float, bool and list respectively.

    Raises:
        ConfigError: If the override is not of the form `path=value`.
    """
    if "=" not in override:
        raise ConfigError("Invalid override", f"expected key=value, got {override!r}")
    path, raw = override.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError("Invalid override", f"empty key in {override!r}")
    try:
        value = YAML(typ="safe").load(raw) if raw.strip() else None
    except YAMLError as e:
        raise ConfigError("Invalid override value", f"{override!r}: {e}") from e
    return keys, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply dotted-path overrides to a raw configuration mapping in place."""
    for override in overrides:
        keys, value = parse_override(override)
        node = data
        for key in keys[:-1]:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[keys[-1]] = value
    return data


class ConfigManager:
    """Loads, validates and persists a run configuration.

    The manager reads a YAML or JSON file, applies command-line overrides
    (flags > file > defaults) and validates the result against `RunConfig`.
    All validation failures are reported together in one `ConfigError`.

    Attributes:
        config_path: Path to the configuration file, or None for defaults.
        config: The validated configuration object.
    """

    def __init__(
        self,
        config_path: Optional[str] = None,
        overrides: Sequence[str] = (),
    ) -> None:
        """Initialize the configuration manager.

        Args:
            config_path: Path to a YAML/JSON configuration file; None uses
                only defaults and overrides.
            overrides: `section.key=value` strings applied after the file.

        Raises:
            ConfigError: If the file cannot be loaded or fails validation.
        """
        self.config_path = Path(config_path) if config_path else None
        self.yaml = YAML(typ="safe")
        self.config = self._load_config(list(overrides))

    def _read_file(self) -> Dict[str, Any]:
        """Read the raw mapping from the configuration file."""
        if self.config_path is None:
            return {}
        if not self.config_path.exists():
            raise ConfigError(
                "Configuration file not found",
                f"File not found: {self.config_path}",
            )
        try:
            with self.config_path.open("r", encoding="utf-8") as f:
                data = self.yaml.load(f)
        except (YAMLError, OSError) as e:
            raise ConfigError(
                "Failed to load configuration",
                f"Error loading {self.config_path}: {e}",
            ) from e
        if not data:
            raise ConfigError(
                "Empty configuration file",
                f"File is empty: {self.config_path}",
            )
        if not isinstance(data, dict):
            raise ConfigError(
                "Failed to load configuration",
                f"Top level of {self.config_path} must be a mapping",
            )
        return data

    def _load_config(self, overrides: List[str]) -> RunConfig:
        """Load, override and validate the configuration."""
        data = apply_overrides(self._read_file(), overrides)
        try:
            return RunConfig(**data)
        except ValidationError as e:
            raise ConfigError(
                "Invalid configuration", _format_validation_error(e)
            ) from e

    def save_effective(self, path: Path) -> Path:
        """Write the fully resolved configuration as JSON.

        Args:
            path: Destination file.

        Returns:
            The path written.

        Raises:
            ConfigError: If the file cannot be written.
        """
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(dump_config(self.config), encoding="utf-8")
        except OSError as e:
            raise ConfigError(
                "Failed to save configuration", f"Error saving to {path}: {e}"
            ) from e
        logger.info("Effective configuration written to %s", path)
        return path

    @property
    def train(self) -> TrainSettings:
        """Get the training loop settings."""
        return self.config.train

    @property
    def dataset(self) -> DatasetSettings:
        """Get the dataset settings."""
        return self.config.dataset

    @property
    def probe(self) -> ProbeSettings:
        """Get the probe settings."""
        return self.config.probe

    @property
    def output(self) -> OutputSettings:
        """Get the output settings."""
        return self.config.output

    @property
    def logging(self) -> LoggingSettings:
        """Get the logging settings."""
        return self.config.logging


def dump_config(config: BaseModel) -> str:
    """Serialize a configuration model to canonical JSON."""
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_reference() -> str:
    """Return every configuration key with its default value, as JSON."""
    return dump_config(RunConfig())
