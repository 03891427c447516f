"""Projector signatures and determinant-maximizing projector selection.

A projector's signature is its behavioural fingerprint on a probe batch X:

    Y = row_l2_normalize(g(X))      # m x d
    A = Y Y^T                       # m x m cosine Gram
    a = vec(A) / |vec(A)|           # unit vector of length m^2

Selecting K of N candidates maximizes |det(B)|, B being the Gram matrix of the
chosen signatures. The exact problem is NP-hard, so `select_diverse` runs the
greedy MAP approximation with incremental Cholesky updates
(O(N * K * m^2) in total). `exhaustive_select` enumerates every subset and
serves as an oracle on small instances.
"""

import hashlib
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lfr_tabular.errors import DegenerateSignatureError, SelectionError
from lfr_tabular.nn import ProjectorModel
from lfr_tabular.tensor import DEFAULT_EPS, Tensor, row_l2_normalize

logger = logging.getLogger(__name__)

# Squared orthogonal residual below which a candidate adds no volume.
SINGULAR_EPS = 1e-10
TIE_RTOL = 1e-12
EXHAUSTIVE_BUDGET = 10**6


@dataclass(frozen=True)
class ProjectorSignature:
    """Unit-norm flattened cosine Gram of one projector on the probe batch."""

    vector: np.ndarray
    projector_index: int
    probe_batch_hash: int


@dataclass
class SelectionResult:
    """Outcome of choosing K projectors out of N candidates.

    Attributes:
        chosen_indices: Projector indices of the chosen set, ascending.
        log_det: log|det(B)| of the chosen set; -inf when singular.
        candidate_count: Number of candidates N considered.
        selection_order: Chosen indices in the order they were picked.
        singular: True when the set was completed by index because every
            remaining candidate was numerically dependent.
        strategy: `dpp`, `exhaustive`, `random` or `first`.
    """

    chosen_indices: List[int]
    log_det: float
    candidate_count: int
    selection_order: List[int] = field(default_factory=list)
    singular: bool = False
    strategy: str = "dpp"

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly view (-inf is rendered as None)."""
        return {
            "chosen_indices": list(self.chosen_indices),
            "log_det": self.log_det if math.isfinite(self.log_det) else None,
            "candidate_count": self.candidate_count,
            "selection_order": list(self.selection_order),
            "singular": self.singular,
            "strategy": self.strategy,
        }


def probe_batch_digest(batch: Tensor) -> int:
    """64-bit digest of a probe batch's shape and bytes."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(batch.shape).encode("utf-8"))
    h.update(np.ascontiguousarray(batch.data).tobytes())
    return int.from_bytes(h.digest(), "little")


def signature_from_outputs(
    outputs: Tensor, projector_index: int, probe_batch_hash: int, eps: float
) -> ProjectorSignature:
    """Build a signature from projector outputs [m x d].

    Raises:
        DegenerateSignatureError: If the outputs are zero on the whole batch.
    """
    if len(outputs.shape) != 2 or outputs.shape[0] < 2:
        raise SelectionError(
            "Signatures need a probe batch of at least 2 rows",
            f"outputs shape {list(outputs.shape)}",
        )
    y = row_l2_normalize(outputs, eps).data.astype(np.float64)
    a = (y @ y.T).reshape(-1)
    norm = float(np.linalg.norm(a))
    if norm < eps:
        raise DegenerateSignatureError(
            "Projector output is zero on the whole probe batch",
            f"projector {projector_index}",
        )
    return ProjectorSignature(a / norm, projector_index, probe_batch_hash)


def compute_signature(
    projector: ProjectorModel,
    probe_batch: Tensor,
    eps: float = DEFAULT_EPS,
    projector_index: int = 0,
) -> ProjectorSignature:
    """Signature of a frozen projector on `probe_batch` [m x d_in]."""
    return signature_from_outputs(
        projector(probe_batch), projector_index, probe_batch_digest(probe_batch), eps
    )


def compute_signatures(
    projectors: Sequence[ProjectorModel],
    probe_batch: Tensor,
    eps: float = DEFAULT_EPS,
    workers: int = 1,
) -> Tuple[List[ProjectorSignature], List[int]]:
    """Signatures of every candidate; degenerate candidates are discarded.

    Args:
        projectors: Candidate projectors; their position is their index.
        probe_batch: The shared probe batch.
        eps: Norm guard.
        workers: Threads used for the forward passes (1 = sequential).

    Returns:
        (valid signatures in index order, indices of discarded candidates).
    """
    batch_hash = probe_batch_digest(probe_batch)

    def one(item: Tuple[int, ProjectorModel]) -> Optional[ProjectorSignature]:
        index, projector = item
        try:
            return signature_from_outputs(
                projector(probe_batch), index, batch_hash, eps
            )
        except DegenerateSignatureError as e:
            logger.warning("Discarding candidate projector: %s", e)
            return None

    items = list(enumerate(projectors))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]
    valid = [s for s in results if s is not None]
    discarded = [i for i, s in zip(range(len(items)), results) if s is None]
    return valid, discarded


def _ordered(
    signatures: Sequence[ProjectorSignature], k: int
) -> Tuple[List[ProjectorSignature], np.ndarray]:
    if not 1 <= k <= len(signatures):
        raise SelectionError(
            "Cannot select K projectors", f"K={k}, N={len(signatures)}"
        )
    hashes = {s.probe_batch_hash for s in signatures}
    if len(hashes) != 1:
        raise SelectionError(
            "Signatures were computed on different probe batches",
            f"{len(hashes)} distinct batch digests",
        )
    ordered = sorted(signatures, key=lambda s: s.projector_index)
    return ordered, np.stack([np.asarray(s.vector, dtype=np.float64) for s in ordered])


def _argmax_lowest(scores: np.ndarray) -> int:
    """Position of the maximum; near-ties go to the lowest position."""
    best = float(np.max(scores))
    tolerance = TIE_RTOL * max(1.0, abs(best))
    return int(np.flatnonzero(scores >= best - tolerance)[0])


def select_diverse(
    signatures: Sequence[ProjectorSignature], k: int
) -> SelectionResult:
    """Greedy MAP selection of K signatures maximizing log|det(B)|.

    Each step adds the candidate whose signature has the largest residual
    after projecting out the already-chosen ones; ties go to the lowest
    projector index. When every remaining candidate has a squared residual
    below `SINGULAR_EPS`, the remaining slots are filled by lowest index
    and `log_det` is -inf.

    Raises:
        SelectionError: If K is not in [1, N] or the signatures come from
            different probe batches.
    """
    ordered, stacked = _ordered(signatures, k)
    n = len(ordered)
    residuals = np.einsum("ij,ij->i", stacked, stacked)
    factors = np.zeros((k, n))
    available = np.ones(n, dtype=bool)
    picked: List[int] = []
    log_det = 0.0
    singular = False

    for step in range(k):
        scores = np.where(available, residuals, -np.inf)
        j = _argmax_lowest(scores)
        if scores[j] < SINGULAR_EPS:
            singular = True
            break
        picked.append(j)
        available[j] = False
        log_det += math.log(scores[j])
        if step == k - 1:
            break
        column = stacked @ stacked[j]
        update = (column - factors[:step].T @ factors[:step, j]) / math.sqrt(scores[j])
        factors[step] = update
        residuals = residuals - update * update

    if singular:
        fill = [p for p in range(n) if available[p]][: k - len(picked)]
        logger.warning(
            "Greedy selection hit a singular set after %d of %d picks; "
            "filling by lowest index",
            len(picked),
            k,
        )
        picked.extend(fill)
        log_det = -math.inf

    order = [ordered[p].projector_index for p in picked]
    return SelectionResult(
        chosen_indices=sorted(order),
        log_det=log_det,
        candidate_count=n,
        selection_order=order,
        singular=singular,
        strategy="dpp",
    )


def exhaustive_select(
    signatures: Sequence[ProjectorSignature],
    k: int,
    budget: int = EXHAUSTIVE_BUDGET,
) -> SelectionResult:
    """Exact argmax of |det(B)| over all K-subsets (test oracle).

    Ties go to the lexicographically smallest index set.

    Raises:
        SelectionError: If C(N, K) exceeds `budget`.
    """
    ordered, stacked = _ordered(signatures, k)
    n = len(ordered)
    count = math.comb(n, k)
    if count > budget:
        raise SelectionError(
            "Exhaustive selection over budget", f"C({n}, {k}) = {count} > {budget}"
        )
    gram = stacked @ stacked.T
    best_value = -math.inf
    best: Tuple[int, ...] = tuple(range(k))
    for subset in itertools.combinations(range(n), k):
        sign, logabs = np.linalg.slogdet(gram[np.ix_(subset, subset)])
        value = float(logabs) if sign != 0 else -math.inf
        if value > best_value + TIE_RTOL * max(1.0, abs(value)):
            best_value, best = value, subset
    chosen = [ordered[p].projector_index for p in best]
    return SelectionResult(
        chosen_indices=sorted(chosen),
        log_det=best_value,
        candidate_count=n,
        selection_order=chosen,
        singular=not math.isfinite(best_value),
        strategy="exhaustive",
    )


def _vectors_for(
    signatures: Sequence[ProjectorSignature], indices: Sequence[int]
) -> np.ndarray:
    by_index = {s.projector_index: s for s in signatures}
    missing = [i for i in indices if i not in by_index]
    if missing:
        raise SelectionError("Unknown projector indices", str(missing))
    return np.stack([np.asarray(by_index[i].vector, dtype=np.float64) for i in indices])


def subset_log_det(
    signatures: Sequence[ProjectorSignature], indices: Sequence[int]
) -> float:
    """log|det(B)| of the Gram matrix of the signatures at `indices`."""
    vectors = _vectors_for(signatures, indices)
    sign, logabs = np.linalg.slogdet(vectors @ vectors.T)
    return float(logabs) if sign != 0 else -math.inf


def signature_cosines(
    signatures: Sequence[ProjectorSignature], indices: Sequence[int]
) -> np.ndarray:
    """Pairwise cosines (Gram entries) of the unit-norm signatures at `indices`."""
    vectors = _vectors_for(signatures, indices)
    return vectors @ vectors.T


def select_projectors(
    signatures: Sequence[ProjectorSignature],
    k: int,
    strategy: str = "dpp",
    rng: Optional[np.random.Generator] = None,
) -> SelectionResult:
    """Choose K projectors with the configured strategy.

    `dpp` runs `select_diverse`; `random` draws K candidates uniformly from
    `rng`; `first` keeps the K lowest indices. The last two exist to measure
    what diversity selection contributes.
    """
    if strategy == "dpp":
        return select_diverse(signatures, k)
    ordered, _ = _ordered(signatures, k)
    indices = [s.projector_index for s in ordered]
    if strategy == "random":
        if rng is None:
            raise SelectionError("Random selection needs a generator")
        chosen = [indices[p] for p in rng.choice(len(indices), size=k, replace=False)]
    elif strategy == "first":
        chosen = indices[:k]
    else:
        raise SelectionError("Unknown selection strategy", strategy)
    return SelectionResult(
        chosen_indices=sorted(chosen),
        log_det=subset_log_det(signatures, chosen),
        candidate_count=len(indices),
        selection_order=chosen,
        strategy=strategy,
    )
