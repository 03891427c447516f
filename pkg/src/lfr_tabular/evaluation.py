"""Frozen-representation evaluation with a logistic-regression probe.

The encoder embeds both splits without recording gradients. A multinomial
logistic regression is fitted on the standardized training embeddings by
accelerated full-batch gradient descent on

    mean cross-entropy + l2 / 2 * |W|^2

with step 1/L, where L bounds the Lipschitz constant of the gradient. The
report's accuracy is the fraction of test rows whose argmax logit equals the
label; ties go to the lowest class index.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np

from lfr_tabular.config import ModelSettings, ProbeSettings
from lfr_tabular.data import Dataset
from lfr_tabular.errors import DataError, ShapeError
from lfr_tabular.nn import DenseLayer, EncoderModel, FeedForward
from lfr_tabular.rng import make_generator
from lfr_tabular.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

EncoderSource = Literal["lfr", "random-init", "raw"]
STD_FLOOR = 1e-12


@dataclass
class ProbeModel:
    """A fitted linear classifier over standardized embeddings.

    Attributes:
        weight: [latent x classes] weights.
        bias: [classes] bias.
        mean: Training embedding mean used for standardization.
        scale: Training embedding std (floored) used for standardization.
        iterations: Gradient steps taken.
        converged: True when the gradient norm fell below the tolerance.
        checkpoint_digest: Digest of the encoder checkpoint it was fitted on.
    """

    weight: Tensor
    bias: Tensor
    mean: np.ndarray
    scale: np.ndarray
    iterations: int = 0
    converged: bool = False
    checkpoint_digest: Optional[str] = None

    @property
    def num_classes(self) -> int:
        """Number of output classes."""
        return self.weight.shape[1]

    def logits(self, embeddings: Tensor) -> np.ndarray:
        """Class scores [n x classes] in float64."""
        if embeddings.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                "Probe input width mismatch",
                f"expected {self.weight.shape[0]}, got {embeddings.shape[1]}",
            )
        x = (embeddings.data.astype(np.float64) - self.mean) / self.scale
        return x @ self.weight.data + self.bias.data

    def predict(self, embeddings: Tensor) -> np.ndarray:
        """Predicted class per row; np.argmax keeps the lowest index on ties."""
        return np.argmax(self.logits(embeddings), axis=1)


@dataclass
class EvalReport:
    """Outcome of one probe fit."""

    accuracy: float
    per_class: Dict[str, float]
    n_train: int
    n_test: int
    seed: int
    encoder_source: str
    checkpoint_digest: Optional[str] = None
    train_accuracy: Optional[float] = None
    probe_iterations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly view."""
        return asdict(self)


@dataclass
class EvalSummary:
    """Reports of several probe seeds with their mean and standard deviation."""

    reports: List[EvalReport] = field(default_factory=list)

    @property
    def accuracies(self) -> List[float]:
        """Test accuracy per seed."""
        return [r.accuracy for r in self.reports]

    @property
    def mean(self) -> float:
        """Mean test accuracy."""
        return float(np.mean(self.accuracies)) if self.reports else 0.0

    @property
    def std(self) -> float:
        """Population standard deviation of the test accuracy."""
        return float(np.std(self.accuracies)) if self.reports else 0.0

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly view with one entry per seed."""
        first = self.reports[0] if self.reports else None
        return {
            "encoder_source": first.encoder_source if first else None,
            "checkpoint_digest": first.checkpoint_digest if first else None,
            "seeds": [r.seed for r in self.reports],
            "mean_accuracy": self.mean,
            "std_accuracy": self.std,
            "reports": [r.to_dict() for r in self.reports],
        }

    def save(self, path: Path) -> Path:
        """Write the summary as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def identity_encoder(dim: int) -> FeedForward:
    """A single linear layer with weight I and zero bias (raw-feature probe)."""
    layer = DenseLayer(dim, dim, activation="none", name="identity")
    layer.weight.data[...] = np.eye(dim)
    model = FeedForward([layer])
    model.set_trainable(False)
    return model


def random_init_encoder(in_dim: int, model: ModelSettings, seed: int) -> EncoderModel:
    """An untrained encoder with the run's architecture and fresh parameters."""
    return EncoderModel.build(
        in_dim,
        model.latent_dim,
        hidden=model.encoder_hidden,
        depth=model.encoder_depth,
        rng=make_generator(seed, "random_init_encoder"),
    )


def embed_dataset(
    encoder: FeedForward, dataset: Dataset, chunk_size: int = 1024
) -> Tensor:
    """Row i of the result is encoder(x_i); no gradients are recorded.

    Raises:
        ShapeError: If the dataset width differs from the encoder input.
    """
    if dataset.dim != encoder.in_dim:
        raise ShapeError(
            "Dataset width does not match the encoder input",
            f"{dataset.dim} vs {encoder.in_dim}",
        )
    chunks = []
    with no_grad():
        for start in range(0, dataset.n, chunk_size):
            rows = Tensor(dataset.features.data[start : start + chunk_size])
            chunks.append(encoder(rows).data)
    if not chunks:
        return Tensor(np.zeros((0, encoder.out_dim)))
    return Tensor(np.concatenate(chunks, axis=0))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def train_probe(
    embeddings: Tensor,
    labels: np.ndarray,
    probe_cfg: ProbeSettings,
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> ProbeModel:
    """Fit multinomial logistic regression by accelerated gradient descent.

    Args:
        embeddings: Training embeddings [n x latent].
        labels: Integer labels in [0, classes).
        probe_cfg: Regularization, tolerance and iteration cap.
        seed: Seeds the small random initial weights.
        num_classes: Class count; defaults to max(label) + 1.

    Returns:
        The fitted probe.

    Raises:
        DataError: If only one class is present, labels are out of range, or
            there are fewer rows than classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, d = embeddings.shape
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    if labels.shape != (n,):
        raise DataError(
            "Label count does not match embeddings", f"{labels.shape} vs {n}"
        )
    if len(np.unique(labels)) < 2:
        raise DataError(
            "Probe needs at least two classes", f"labels: {np.unique(labels)}"
        )
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError("Labels out of range", f"expected [0, {classes})")
    if n < classes:
        raise DataError("Fewer rows than classes", f"n={n}, classes={classes}")

    raw = embeddings.data.astype(np.float64)
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale = np.where(scale < STD_FLOOR, 1.0, scale)
    x = (raw - mean) / scale
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0

    # Softmax cross-entropy has Hessian <= 1/2 I per row.
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    lipschitz = 0.5 * float(np.linalg.eigvalsh(xb.T @ xb / n)[-1]) + probe_cfg.l2
    step = 1.0 / lipschitz

    rng = make_generator(seed, "probe")
    w = probe_cfg.init_scale * rng.standard_normal((d, classes))
    b = np.zeros(classes)
    w_look, b_look = w.copy(), b.copy()
    converged = False
    iterations = 0
    for iterations in range(1, probe_cfg.max_iter + 1):
        residual = (_softmax(x @ w_look + b_look) - onehot) / n
        grad_w = x.T @ residual + probe_cfg.l2 * w_look
        grad_b = residual.sum(axis=0)
        if np.sqrt(np.sum(grad_w**2) + np.sum(grad_b**2)) < probe_cfg.tol:
            w, b = w_look, b_look
            converged = True
            break
        w_next = w_look - step * grad_w
        b_next = b_look - step * grad_b
        momentum = (iterations - 1) / (iterations + 2)
        w_look = w_next + momentum * (w_next - w)
        b_look = b_next + momentum * (b_next - b)
        w, b = w_next, b_next
    if not converged:
        logger.debug(
            "Probe stopped at max_iter=%d without converging", probe_cfg.max_iter
        )
    return ProbeModel(
        weight=Tensor(w, dtype=np.float64),
        bias=Tensor(b, dtype=np.float64),
        mean=mean,
        scale=scale,
        iterations=iterations,
        converged=converged,
    )


def _class_names(dataset: Dataset, classes: int) -> List[str]:
    if dataset.feature_meta is not None:
        return list(dataset.feature_meta.classes)
    return [str(c) for c in range(classes)]


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Exact fraction of correct predictions."""
    return int(np.sum(predictions == labels)) / len(labels)


def evaluate(
    encoder: FeedForward,
    train_split: Dataset,
    test_split: Dataset,
    probe_cfg: ProbeSettings,
    seed: int = 0,
    encoder_source: EncoderSource = "lfr",
    checkpoint_digest: Optional[str] = None,
) -> EvalReport:
    """Embed both splits, fit a probe on train and score it on test.

    Raises:
        DataError: If the test split is empty.
    """
    if test_split.n == 0:
        raise DataError("Test split is empty")
    classes = max(train_split.num_classes, test_split.num_classes)
    train_emb = embed_dataset(encoder, train_split, probe_cfg.chunk_size)
    test_emb = embed_dataset(encoder, test_split, probe_cfg.chunk_size)
    probe = train_probe(train_emb, train_split.labels, probe_cfg, seed, classes)
    probe.checkpoint_digest = checkpoint_digest

    predictions = probe.predict(test_emb)
    names = _class_names(train_split, classes)
    per_class = {}
    for c in range(classes):
        mask = test_split.labels == c
        if mask.any():
            per_class[names[c]] = accuracy(predictions[mask], test_split.labels[mask])
    report = EvalReport(
        accuracy=accuracy(predictions, test_split.labels),
        per_class=per_class,
        n_train=train_split.n,
        n_test=test_split.n,
        seed=seed,
        encoder_source=encoder_source,
        checkpoint_digest=checkpoint_digest,
        train_accuracy=accuracy(probe.predict(train_emb), train_split.labels),
        probe_iterations=probe.iterations,
    )
    logger.info(
        "Probe (%s, seed %d): test accuracy %.4f over %d rows",
        encoder_source,
        seed,
        report.accuracy,
        report.n_test,
    )
    return report


def evaluate_seeds(
    encoder: FeedForward,
    train_split: Dataset,
    test_split: Dataset,
    probe_cfg: ProbeSettings,
    seeds: Sequence[int],
    encoder_source: EncoderSource = "lfr",
    checkpoint_digest: Optional[str] = None,
) -> EvalSummary:
    """Run `evaluate` once per seed and collect the reports."""
    return EvalSummary(
        [
            evaluate(
                encoder,
                train_split,
                test_split,
                probe_cfg,
                seed,
                encoder_source,
                checkpoint_digest,
            )
            for seed in seeds
        ]
    )
