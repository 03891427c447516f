"""Tabular datasets: CSV ingestion, preprocessing, synthetic data and batching.

CSV files are read with pandas. Preprocessing is fitted on the training
split only, with scikit-learn's `StandardScaler` and `pandas.get_dummies`:

- numeric columns are z-scored with the training mean and standard
  deviation (a constant column gets std 1 and becomes all zeros)
- categorical columns are one-hot encoded over the training categories;
  categories first seen in the test split map to an all-zero block
- rows with a missing value in any used column are dropped and counted

The fitted `FeatureMeta` is JSON-serializable, so a probe run can apply the
exact transform used at pretraining time.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from lfr_tabular.config import ColumnSpec, DatasetSettings, SyntheticSettings
from lfr_tabular.errors import DataError
from lfr_tabular.rng import make_generator
from lfr_tabular.tensor import Tensor

logger = logging.getLogger(__name__)

SplitTag = Literal["train", "test"]
ColumnKind = Literal["numeric", "categorical"]

# A final partial batch smaller than this is merged into the previous batch.
MIN_TAIL_ROWS = 3
STD_FLOOR = 1e-12

ADULT_COLUMNS: Tuple[Tuple[str, ColumnKind], ...] = (
    ("age", "numeric"),
    ("workclass", "categorical"),
    ("fnlwgt", "numeric"),
    ("education", "categorical"),
    ("education-num", "numeric"),
    ("marital-status", "categorical"),
    ("occupation", "categorical"),
    ("relationship", "categorical"),
    ("race", "categorical"),
    ("sex", "categorical"),
    ("capital-gain", "numeric"),
    ("capital-loss", "numeric"),
    ("hours-per-week", "numeric"),
    ("native-country", "categorical"),
    ("income", "categorical"),
)


@dataclass(frozen=True)
class CsvSchema:
    """How to read one CSV source.

    Attributes:
        columns: Column declarations. Without a header they must list every
            file column in file order; the label column may appear here.
        label_column: Name of the label column.
        header: Whether the first (non-skipped) line holds column names.
        missing_token: Cell value treated as missing.
        normalize_labels: Strip whitespace and a trailing "." from labels.
    """

    columns: Tuple[ColumnSpec, ...]
    label_column: str
    header: bool = True
    missing_token: str = "?"
    normalize_labels: bool = False

    @property
    def feature_columns(self) -> List[ColumnSpec]:
        """Declared columns other than the label, in declared order."""
        return [c for c in self.columns if c.name != self.label_column]


def adult_income_schema() -> CsvSchema:
    """Schema of the UCI Adult files (`adult.data` / `adult.test`)."""
    return CsvSchema(
        columns=tuple(ColumnSpec(name=n, kind=k) for n, k in ADULT_COLUMNS),
        label_column="income",
        header=False,
        missing_token="?",
        normalize_labels=True,
    )


@dataclass
class ColumnMeta:
    """Fitted transform of one feature column."""

    name: str
    kind: ColumnKind
    mean: float = 0.0
    std: float = 1.0
    categories: List[str] = field(default_factory=list)

    @property
    def width(self) -> int:
        """Number of output features produced by this column."""
        return len(self.categories) if self.kind == "categorical" else 1

    def scaler(self) -> StandardScaler:
        """A `StandardScaler` restored from the fitted mean and std."""
        scaler = StandardScaler()
        scaler.mean_ = np.array([self.mean])
        scaler.scale_ = np.array([self.std])
        scaler.var_ = np.array([self.std**2])
        scaler.n_features_in_ = 1
        return scaler

    def transform(self, values: pd.Series) -> np.ndarray:
        """Encode a column of cleaned values as float64 [n x width]."""
        if self.kind == "numeric":
            column = values.to_numpy(dtype=np.float64)[:, None]
            return self.scaler().transform(column)
        # Values outside the fitted categories become NaN: an all-zero row.
        codes = pd.Categorical(values.astype(str), categories=self.categories)
        return pd.get_dummies(codes, dtype=np.float64).to_numpy()


@dataclass
class FeatureMeta:
    """Everything needed to turn a raw table into a feature matrix."""

    columns: List[ColumnMeta]
    label_column: str
    classes: List[str]

    @property
    def width(self) -> int:
        """Feature dimension d after encoding."""
        return sum(c.width for c in self.columns)

    @property
    def feature_names(self) -> List[str]:
        """Output feature names; one-hot features are `column=category`."""
        names: List[str] = []
        for c in self.columns:
            if c.kind == "numeric":
                names.append(c.name)
            else:
                names.extend(f"{c.name}={v}" for v in c.categories)
        return names

    @classmethod
    def fit(cls, frame: pd.DataFrame, schema: CsvSchema) -> "FeatureMeta":
        """Fit column transforms and the label map on a cleaned train frame."""
        columns = []
        for spec in schema.feature_columns:
            if spec.kind == "numeric":
                values = frame[spec.name].to_numpy(dtype=np.float64)[:, None]
                scaler = StandardScaler().fit(values)
                std = float(scaler.scale_[0])
                if scaler.var_[0] < STD_FLOOR**2:
                    logger.warning("Column %s is constant; using std 1", spec.name)
                    std = 1.0
                columns.append(
                    ColumnMeta(spec.name, "numeric", float(scaler.mean_[0]), std)
                )
            else:
                categories = sorted(frame[spec.name].astype(str).unique())
                columns.append(
                    ColumnMeta(spec.name, "categorical", categories=categories)
                )
        classes = _sorted_labels(frame[schema.label_column].unique())
        return cls(columns, schema.label_column, classes)

    def transform(
        self, frame: pd.DataFrame, source: str = "<frame>"
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Encode a cleaned frame into (float32 features, int64 labels).

        Raises:
            DataError: If a label was not seen when fitting.
        """
        blocks = [c.transform(frame[c.name]) for c in self.columns]
        features = (
            np.concatenate(blocks, axis=1)
            if blocks
            else np.zeros((len(frame), 0), dtype=np.float64)
        )
        index = {c: i for i, c in enumerate(self.classes)}
        raw = frame[self.label_column].astype(str)
        unknown = sorted(set(raw) - set(index))
        if unknown:
            raise DataError(
                f"Unknown label values in {source}",
                f"{unknown[:5]} not in {self.classes}",
            )
        labels = raw.map(index).to_numpy(dtype=np.int64)
        return features.astype(np.float32), labels

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly view."""
        return {
            "label_column": self.label_column,
            "classes": list(self.classes),
            "columns": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "mean": c.mean,
                    "std": c.std,
                    "categories": list(c.categories),
                }
                for c in self.columns
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureMeta":
        """Inverse of `to_dict`.

        Raises:
            DataError: If a required key is missing.
        """
        try:
            columns = [
                ColumnMeta(
                    name=c["name"],
                    kind=c["kind"],
                    mean=float(c.get("mean", 0.0)),
                    std=float(c.get("std", 1.0)),
                    categories=list(c.get("categories", [])),
                )
                for c in data["columns"]
            ]
            return cls(columns, data["label_column"], list(data["classes"]))
        except (KeyError, TypeError) as e:
            raise DataError("Invalid feature metadata", str(e)) from e

    def save(self, path: Path) -> Path:
        """Write the metadata as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Path) -> "FeatureMeta":
        """Read metadata written by `save`."""
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError("Failed to read feature metadata", f"{path}: {e}") from e


def _sorted_labels(values: Sequence[Any]) -> List[str]:
    labels = [str(v) for v in values]
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


@dataclass
class Dataset:
    """An in-memory feature matrix with integer labels."""

    features: Tensor
    labels: np.ndarray
    feature_meta: Optional[FeatureMeta] = None
    split_tag: SplitTag = "train"

    def __post_init__(self) -> None:
        if len(self.features.shape) != 2:
            raise DataError("Features must be a 2-D matrix", str(self.features.shape))
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(
                "Label count does not match row count",
                f"{self.labels.shape} vs {self.features.shape[0]} rows",
            )
        if not np.all(np.isfinite(self.features.data)):
            raise DataError("Features contain NaN or Inf", self.split_tag)

    @property
    def n(self) -> int:
        """Number of rows."""
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        """Feature dimension d."""
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        """Number of classes (from the metadata when present)."""
        if self.feature_meta is not None:
            return len(self.feature_meta.classes)
        return int(self.labels.max()) + 1 if self.n else 0

    def take(self, indices: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Rows at `indices` as a (features, labels) pair."""
        return Tensor(self.features.data[indices]), self.labels[indices]


def _line_number(position: int, schema: CsvSchema, skip_rows: int) -> int:
    return position + 1 + skip_rows + (1 if schema.header else 0)


def _read_frame(path: Path, schema: CsvSchema, skip_rows: int) -> pd.DataFrame:
    if not path.exists():
        raise DataError("CSV file not found", str(path))
    names = None if schema.header else [c.name for c in schema.columns]
    try:
        frame = pd.read_csv(
            path,
            header=0 if schema.header else None,
            names=names,
            skiprows=skip_rows,
            dtype=str,
            skipinitialspace=True,
            na_values=[schema.missing_token, ""],
            keep_default_na=False,
            skip_blank_lines=True,
            index_col=False,
        )
    except pd.errors.EmptyDataError as e:
        raise DataError("CSV file is empty", str(path)) from e
    except (pd.errors.ParserError, UnicodeDecodeError, ValueError) as e:
        raise DataError("Unparseable CSV", f"{path}: {e}") from e
    return frame.reset_index(drop=True)


def _clean_frame(
    frame: pd.DataFrame, schema: CsvSchema, path: Path, skip_rows: int
) -> pd.DataFrame:
    """Validate columns, parse numbers, normalize labels and drop missing rows."""
    if schema.label_column not in frame.columns:
        raise DataError("Label column missing", f"{schema.label_column!r} in {path}")
    used = [c.name for c in schema.feature_columns]
    absent = [name for name in used if name not in frame.columns]
    if absent:
        raise DataError("Schema columns missing from CSV", f"{absent} in {path}")
    frame = frame[used + [schema.label_column]].copy()

    for spec in schema.feature_columns:
        if spec.kind != "numeric":
            continue
        raw = frame[spec.name]
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = parsed.isna() & raw.notna()
        if bad.any():
            position = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                "Unparseable numeric value",
                f"{path} line {_line_number(position, schema, skip_rows)}: "
                f"column {spec.name!r} = {raw.iloc[position]!r}",
            )
        frame[spec.name] = parsed.astype(np.float64)

    if schema.normalize_labels:
        labels = frame[schema.label_column]
        frame[schema.label_column] = labels.where(
            labels.isna(), labels.astype(str).str.strip().str.rstrip(".")
        )

    missing = frame.isna().any(axis=1)
    dropped = int(missing.sum())
    if dropped:
        logger.info("Dropped %d rows with missing values from %s", dropped, path)
    return frame.loc[~missing].reset_index(drop=True)


def load_csv(
    path: Path,
    schema: CsvSchema,
    meta: Optional[FeatureMeta] = None,
    split_tag: SplitTag = "train",
    skip_rows: int = 0,
) -> Dataset:
    """Load and preprocess one CSV file.

    Args:
        path: CSV file (UTF-8, comma separated).
        schema: Column declarations and parsing options.
        meta: Fitted transform to apply; None fits a new one on this file
            (use None only for the training split).
        split_tag: `train` or `test`.
        skip_rows: Leading lines skipped before the header or data.

    Returns:
        The preprocessed dataset.

    Raises:
        DataError: If the file is missing or unparseable (with the line
            number), the label column is absent, or no rows remain.
    """
    path = Path(path)
    frame = _clean_frame(_read_frame(path, schema, skip_rows), schema, path, skip_rows)
    if frame.empty:
        raise DataError("No rows left after dropping missing values", str(path))
    if meta is None:
        meta = FeatureMeta.fit(frame, schema)
    features, labels = meta.transform(frame, str(path))
    logger.info(
        "Loaded %s split from %s: %d rows, %d features",
        split_tag,
        path,
        features.shape[0],
        features.shape[1],
    )
    return Dataset(Tensor(features), labels, meta, split_tag)


def make_synthetic_clusters(
    n: int,
    d_signal: int,
    d_noise: int,
    classes: int,
    sep: float,
    seed: int,
) -> Tuple[Dataset, Dataset]:
    """Gaussian clusters at the corners of a simplex plus pure-noise features.

    Class means are `sep * e_c` for the first `classes` basis vectors of the
    signal subspace, so every pair of means is `sep * sqrt(2)` apart. Each
    row adds unit Gaussian noise; `d_noise` standard normal columns are
    appended. Labels are balanced; the rows are split 75/25.

    Raises:
        DataError: If n < 10 * classes, classes > d_signal or sep < 0.
    """
    if n < 10 * classes:
        raise DataError("Too few rows for the class count", f"n={n}, classes={classes}")
    if classes > d_signal:
        raise DataError(
            "Need at least one signal dimension per class",
            f"classes={classes}, d_signal={d_signal}",
        )
    if sep < 0:
        raise DataError("Cluster separation must be >= 0", str(sep))
    rng = make_generator(seed, "synthetic")
    labels = rng.permutation(np.arange(n) % classes)
    means = np.zeros((classes, d_signal))
    means[np.arange(classes), np.arange(classes)] = sep
    signal = means[labels] + rng.standard_normal((n, d_signal))
    noise = rng.standard_normal((n, d_noise))
    features = np.concatenate([signal, noise], axis=1).astype(np.float32)

    meta = FeatureMeta(
        columns=[ColumnMeta(f"signal_{i}", "numeric") for i in range(d_signal)]
        + [ColumnMeta(f"noise_{i}", "numeric") for i in range(d_noise)],
        label_column="label",
        classes=[str(c) for c in range(classes)],
    )
    order = rng.permutation(n)
    cut = (3 * n) // 4
    train_idx, test_idx = order[:cut], order[cut:]
    return (
        Dataset(Tensor(features[train_idx]), labels[train_idx], meta, "train"),
        Dataset(Tensor(features[test_idx]), labels[test_idx], meta, "test"),
    )


def schema_from_settings(settings: DatasetSettings) -> Tuple[CsvSchema, int]:
    """CSV schema and test-file skip count for a `dataset` section."""
    if settings.recipe == "adult_income":
        return adult_income_schema(), 1
    assert settings.columns is not None and settings.label_column is not None
    schema = CsvSchema(
        columns=tuple(settings.columns),
        label_column=settings.label_column,
        header=settings.header,
        missing_token=settings.missing_token,
        normalize_labels=settings.normalize_labels,
    )
    return schema, settings.skip_test_rows


def load_dataset(
    settings: DatasetSettings, seed: int = 0
) -> Tuple[Dataset, Optional[Dataset]]:
    """Load the train split and the optional test split of a `dataset` section.

    Synthetic data uses `settings.synthetic.seed` when given, else `seed`.
    """
    if settings.kind == "synthetic":
        syn: SyntheticSettings = settings.synthetic
        return make_synthetic_clusters(
            syn.n,
            syn.d_signal,
            syn.d_noise,
            syn.classes,
            syn.sep,
            syn.seed if syn.seed is not None else seed,
        )
    schema, skip_test = schema_from_settings(settings)
    assert settings.train_path is not None
    train = load_csv(Path(settings.train_path), schema, split_tag="train")
    test = None
    if settings.test_path:
        test = load_csv(
            Path(settings.test_path),
            schema,
            meta=train.feature_meta,
            split_tag="test",
            skip_rows=skip_test,
        )
    return train, test


def apply_feature_meta(
    settings: DatasetSettings, meta: FeatureMeta, seed: int = 0
) -> Tuple[Dataset, Optional[Dataset]]:
    """Reload a `dataset` section with a previously fitted transform.

    Used by probing so that the encoder sees exactly the features it was
    pretrained on.
    """
    if settings.kind == "synthetic":
        return load_dataset(settings, seed)
    schema, skip_test = schema_from_settings(settings)
    assert settings.train_path is not None
    train = load_csv(Path(settings.train_path), schema, meta=meta, split_tag="train")
    test = None
    if settings.test_path:
        test = load_csv(
            Path(settings.test_path),
            schema,
            meta=meta,
            split_tag="test",
            skip_rows=skip_test,
        )
    return train, test


def batch_bounds(
    n: int, batch_size: int, drop_last: bool = False
) -> List[Tuple[int, int]]:
    """(start, stop) of every batch over n rows.

    A tail shorter than `MIN_TAIL_ROWS` is merged into the previous batch;
    with `drop_last` any short tail is dropped instead.

    Raises:
        DataError: If batch_size < 2 or batch_size > n.
    """
    if batch_size < 2:
        raise DataError("batch_size must be >= 2", str(batch_size))
    if batch_size > n:
        raise DataError("batch_size exceeds dataset size", f"{batch_size} > {n}")
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    tail = bounds[-1][1] - bounds[-1][0]
    if tail < batch_size:
        if drop_last:
            bounds.pop()
        elif tail < MIN_TAIL_ROWS and len(bounds) > 1:
            start = bounds[-2][0]
            bounds[-2:] = [(start, n)]
    return bounds


@dataclass
class Batch:
    """One mini-batch."""

    features: Tensor
    labels: np.ndarray
    indices: np.ndarray


class BatchIterator:
    """Seeded single-pass iterator over a dataset.

    The permutation is a pure function of (seed, stream, epoch), so E-step
    and M-step passes of one outer epoch can use independent orders by
    passing different stream names.
    """

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        seed: int,
        epoch: int,
        stream: str = "data",
        drop_last: bool = False,
    ) -> None:
        self.dataset = dataset
        self.batch_size = batch_size
        self.drop_last = drop_last
        self.bounds = batch_bounds(dataset.n, batch_size, drop_last)
        self.indices = make_generator(seed, stream, epoch).permutation(dataset.n)
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.bounds)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        if self.cursor >= len(self.bounds):
            raise StopIteration
        start, stop = self.bounds[self.cursor]
        self.cursor += 1
        rows = self.indices[start:stop]
        features, labels = self.dataset.take(rows)
        return Batch(features, labels, rows)


def batches(
    ds: Dataset,
    batch_size: int,
    seed: int,
    epoch: int,
    stream: str = "data",
    drop_last: bool = False,
) -> BatchIterator:
    """Iterate `ds` in mini-batches shuffled by (seed, stream, epoch)."""
    return BatchIterator(ds, batch_size, seed, epoch, stream, drop_last)
