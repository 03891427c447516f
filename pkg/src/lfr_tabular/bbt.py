"""Batch-wise Barlow Twins divergence between projector and predictor outputs.

For each projector k the m x m batch cosine matrix

    c_ij = <y_i, yhat_j> / (max(|y_i|, eps) * max(|yhat_j|, eps))

is pulled towards the identity:

    L = sum_k sum_i [(1 - c_ii)^2 + lambda * sum_{j != i} c_ij^2]

Unlike the feature-wise Barlow Twins loss (a d x d cross-correlation), the
matrix here compares samples with samples. Projector outputs are constants;
gradients flow only into the predictor outputs.
"""

from dataclasses import dataclass
from typing import Dict, Literal, Sequence

import numpy as np

from lfr_tabular.config import BBTSettings
from lfr_tabular.errors import ShapeError
from lfr_tabular.tensor import (
    DEFAULT_EPS,
    Tensor,
    mul,
    no_grad,
    row_l2_normalize,
    scale,
    square,
    sub,
    sum_all,
    transpose,
)


@dataclass(frozen=True)
class BBTConfig:
    """Loss settings.

    Attributes:
        lambda_offdiag: Weight of the squared off-diagonal entries.
        eps: Norm guard of the cosine denominators.
        reduction: `sum` (the literal objective) or `mean` (divided by K * m).
    """

    lambda_offdiag: float = 0.005
    eps: float = DEFAULT_EPS
    reduction: Literal["sum", "mean"] = "sum"

    def __post_init__(self) -> None:
        if not np.isfinite(self.lambda_offdiag) or self.lambda_offdiag < 0:
            raise ValueError(
                f"lambda_offdiag must be finite and >= 0, got {self.lambda_offdiag}"
            )

    @classmethod
    def from_settings(cls, settings: BBTSettings) -> "BBTConfig":
        """Build from the `bbt` configuration section."""
        return cls(settings.lambda_offdiag, settings.eps, settings.reduction)


@dataclass
class CosineMatrix:
    """The m x m batch cosine matrix of one projector/predictor pair."""

    values: Tensor

    @property
    def size(self) -> int:
        """Batch size m."""
        return self.values.shape[0]

    def diagonal(self) -> np.ndarray:
        """c_ii as a float64 array."""
        return np.diag(self.values.data).astype(np.float64)


def cosine_matrix(y: Tensor, yhat: Tensor, eps: float = DEFAULT_EPS) -> CosineMatrix:
    """Cosine similarity between every target row y_i and prediction row yhat_j.

    Raises:
        ShapeError: If the shapes differ or the batch has fewer than 2 rows.
    """
    if y.shape != yhat.shape or len(y.shape) != 2:
        raise ShapeError(
            "cosine_matrix needs two same-shaped 2-D tensors",
            f"{list(y.shape)} vs {list(yhat.shape)}",
        )
    if y.shape[0] < 2:
        raise ShapeError(
            "cosine_matrix needs a batch of at least 2 rows", f"got m={y.shape[0]}"
        )
    values = row_l2_normalize(y, eps) @ transpose(row_l2_normalize(yhat, eps))
    return CosineMatrix(values)


def _weights(m: int, lambda_offdiag: float, dtype: np.dtype) -> Tensor:
    w = np.full((m, m), lambda_offdiag, dtype=np.float64)
    np.fill_diagonal(w, 1.0)
    return Tensor(w, dtype=dtype)


def projector_loss(
    y: Tensor, yhat: Tensor, lambda_offdiag: float, eps: float = DEFAULT_EPS
) -> Tensor:
    """BBT term of a single projector: sum over the weighted (C - I)^2."""
    c = cosine_matrix(y, yhat, eps).values
    m = c.shape[0]
    identity = Tensor(np.eye(m), dtype=c.dtype)
    return sum_all(mul(_weights(m, lambda_offdiag, c.dtype), square(sub(c, identity))))


def _check_pairs(
    projector_outputs: Sequence[Tensor], predictor_outputs: Sequence[Tensor]
) -> None:
    if len(projector_outputs) == 0:
        raise ShapeError("bbt_loss needs at least one projector (K == 0)")
    if len(projector_outputs) != len(predictor_outputs):
        raise ShapeError(
            "bbt_loss needs one prediction per projector",
            f"{len(projector_outputs)} projectors vs {len(predictor_outputs)} "
            "predictions",
        )
    for k, (y, yhat) in enumerate(zip(projector_outputs, predictor_outputs)):
        if y.shape != yhat.shape:
            raise ShapeError(
                f"Shape mismatch for projector {k}",
                f"{list(y.shape)} vs {list(yhat.shape)}",
            )


def bbt_loss(
    projector_outputs: Sequence[Tensor],
    predictor_outputs: Sequence[Tensor],
    cfg: BBTConfig = BBTConfig(),
) -> Tensor:
    """Batch-wise Barlow Twins loss summed over the K projectors.

    Args:
        projector_outputs: K tensors [m x d_k]; treated as constants.
        predictor_outputs: K tensors of matching shapes.
        cfg: Loss settings.

    Returns:
        A scalar tensor >= 0.

    Raises:
        ShapeError: If K == 0 or a pair of shapes differs (naming k).
    """
    _check_pairs(projector_outputs, predictor_outputs)
    terms = [
        projector_loss(y.detach(), yhat, cfg.lambda_offdiag, cfg.eps)
        for y, yhat in zip(projector_outputs, predictor_outputs)
    ]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    if cfg.reduction == "mean":
        m = projector_outputs[0].shape[0]
        total = scale(total, 1.0 / (len(projector_outputs) * m))
    return total


def bbt_breakdown(
    projector_outputs: Sequence[Tensor],
    predictor_outputs: Sequence[Tensor],
    cfg: BBTConfig = BBTConfig(),
) -> Dict[int, float]:
    """Per-projector loss values (no gradient); used for diagnostics."""
    _check_pairs(projector_outputs, predictor_outputs)
    with no_grad():
        return {
            k: projector_loss(y, yhat, cfg.lambda_offdiag, cfg.eps).item()
            for k, (y, yhat) in enumerate(zip(projector_outputs, predictor_outputs))
        }

