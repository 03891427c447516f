"""Learning-from-randomness training: projector selection and alternating updates.

`build_state` creates the encoder, draws N candidate projectors, keeps K
diverse ones and attaches one predictor head per kept projector. `train`
then alternates two phases per outer epoch:

- E-step: one pass over the data updating the encoder only
- M-step: M passes updating the predictor heads only

Projectors are never updated. After every phase the parameter digests of
the three groups are recorded, and `phase_violations` checks that each
phase changed only the group it owns.
"""

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from lfr_tabular.bbt import BBTConfig, bbt_breakdown, bbt_loss
from lfr_tabular.config import TrainConfig
from lfr_tabular.data import Dataset, batches
from lfr_tabular.diversity import (
    SelectionResult,
    compute_signatures,
    select_projectors,
    signature_cosines,
)
from lfr_tabular.errors import DataError, GradientError, NumericalError, SelectionError
from lfr_tabular.logger import TrainingLog
from lfr_tabular.nn import EncoderModel, InitSpec, PredictorModel, ProjectorModel
from lfr_tabular.optim import Optimizer, build_optimizer
from lfr_tabular.rng import derive_seed, make_generator
from lfr_tabular.tensor import Tensor, backward, current_tape, no_grad

logger = logging.getLogger(__name__)

EpochCallback = Callable[["TrainState"], None]


@dataclass
class PhaseRecord:
    """Parameter digests after one training phase."""

    epoch: int
    phase: str
    loss: Optional[float]
    encoder_digest: str
    predictor_digest: str
    projector_digest: str


@dataclass
class TrainState:
    """Everything that evolves during a run.

    Attributes:
        config: The training hyperparameters.
        encoder: The trainable representation network.
        projectors: The K frozen projectors, ascending candidate index.
        predictors: One head per projector.
        encoder_optimizer: Optimizer over the encoder parameters.
        predictor_optimizer: Optimizer over the predictor parameters, with its
            own moments.
        selection: Outcome of the diverse selection.
        epoch: Completed outer epochs.
        step: Encoder updates performed so far.
        e_losses: Mean E-step loss of every outer epoch.
        m_losses: Mean loss of the last M-step pass of every outer epoch.
        history: Digests recorded after every phase.
    """

    config: TrainConfig
    encoder: EncoderModel
    projectors: List[ProjectorModel]
    predictors: List[PredictorModel]
    encoder_optimizer: Optimizer
    predictor_optimizer: Optimizer
    selection: SelectionResult
    discarded: List[int] = field(default_factory=list)
    cosines: Optional[np.ndarray] = None
    epoch: int = 0
    step: int = 0
    last_loss: float = 0.0
    e_losses: List[float] = field(default_factory=list)
    m_losses: List[float] = field(default_factory=list)
    history: List[PhaseRecord] = field(default_factory=list)
    eval_history: List[Tuple[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.projectors) != len(self.predictors):
            raise GradientError(
                "One predictor per projector is required",
                f"{len(self.projectors)} projectors vs "
                f"{len(self.predictors)} predictors",
            )
        if not self.history:
            self.record_phase("init", None)

    @property
    def K(self) -> int:
        """Number of projector/predictor pairs."""
        return len(self.projectors)

    @property
    def bbt(self) -> BBTConfig:
        """Loss settings of the run."""
        return BBTConfig.from_settings(self.config.bbt)

    def predictor_digest(self) -> str:
        """Combined digest of all predictor heads."""
        return _combine(head.digest() for head in self.predictors)

    def projector_digest(self) -> str:
        """Combined digest of all projectors."""
        return _combine(proj.digest() for proj in self.projectors)

    def record_phase(self, phase: str, loss: Optional[float]) -> PhaseRecord:
        """Append the current digests to `history`."""
        record = PhaseRecord(
            epoch=self.epoch,
            phase=phase,
            loss=loss,
            encoder_digest=self.encoder.digest(),
            predictor_digest=self.predictor_digest(),
            projector_digest=self.projector_digest(),
        )
        self.history.append(record)
        return record

    @property
    def budget_exhausted(self) -> bool:
        """True once `train.max_steps` encoder updates were made."""
        max_steps = self.config.train.max_steps
        return max_steps is not None and self.step >= max_steps

    @property
    def workers(self) -> int:
        """Threads usable for independent forwards (1 in deterministic mode)."""
        runtime = self.config.runtime
        return 1 if runtime.deterministic else runtime.workers


def _combine(digests: Iterable[str]) -> str:
    h = hashlib.sha256()
    for d in digests:
        h.update(d.encode("utf-8"))
    return h.hexdigest()


def probe_batch(dataset: Dataset, size: int, seed: int) -> Tensor:
    """The rows used to compute projector signatures.

    Raises:
        DataError: If the dataset has fewer than 2 rows.
    """
    if dataset.n < 2:
        raise DataError("Need at least 2 rows to select projectors", f"n={dataset.n}")
    order = make_generator(seed, "probe_batch").permutation(dataset.n)
    rows = order[: min(size, dataset.n)]
    return dataset.take(np.sort(rows))[0]


def build_candidates(cfg: TrainConfig, in_dim: int) -> List[ProjectorModel]:
    """Generate the N candidate projectors.

    Candidate n draws its parameters from its own stream keyed by
    (seed, "projector", n); with per-projector widths, candidate n has
    width `projector_dim(n % K)`.
    """
    model = cfg.model
    return [
        ProjectorModel.build(
            in_dim,
            cfg.projector_dim(n % cfg.train.K),
            InitSpec(
                scheme=cfg.init.scheme,
                dropout_rate=cfg.init.dropout_rate,
                seed=derive_seed(cfg.train.seed, "projector", n),
            ),
            hidden=model.projector_hidden,
            depth=model.projector_depth,
            index=n,
        )
        for n in range(cfg.candidate_count)
    ]


def build_state(cfg: TrainConfig, dataset: Dataset) -> TrainState:
    """Initialize the encoder, select K of N projectors and create predictors.

    Raises:
        DataError: If the dataset is empty.
        SelectionError: If fewer than K candidates have usable signatures.
    """
    if dataset.n == 0 or dataset.dim == 0:
        raise DataError(
            "Cannot train on an empty dataset", f"shape {dataset.features.shape}"
        )
    train, model = cfg.train, cfg.model
    encoder = EncoderModel.build(
        dataset.dim,
        model.latent_dim,
        hidden=model.encoder_hidden,
        depth=model.encoder_depth,
        rng=make_generator(train.seed, "encoder"),
    )

    candidates = build_candidates(cfg, dataset.dim)
    batch = probe_batch(dataset, cfg.probe_size, train.seed)
    workers = 1 if cfg.runtime.deterministic else cfg.runtime.workers
    signatures, discarded = compute_signatures(
        candidates, batch, cfg.selection.eps, workers=workers
    )
    if len(signatures) < train.K:
        raise SelectionError(
            "Too few non-degenerate candidate projectors",
            f"{len(signatures)} valid of {len(candidates)}, need K={train.K}",
        )
    selection = select_projectors(
        signatures,
        train.K,
        cfg.selection.strategy,
        rng=make_generator(train.seed, "selection"),
    )
    cosines = signature_cosines(signatures, selection.chosen_indices)
    logger.info(
        "Selected projectors %s of %d candidates (%s, log_det=%.4f, %d discarded)",
        selection.chosen_indices,
        selection.candidate_count,
        selection.strategy,
        selection.log_det,
        len(discarded),
    )

    projectors = [candidates[i] for i in selection.chosen_indices]
    predictors = [
        PredictorModel.build(
            model.latent_dim,
            proj.out_dim,
            hidden=model.predictor_hidden,
            rng=make_generator(train.seed, "predictor", k),
            index=k,
        )
        for k, proj in enumerate(projectors)
    ]
    predictor_params = [p for head in predictors for p in head.parameters()]
    return TrainState(
        config=cfg,
        encoder=encoder,
        projectors=projectors,
        predictors=predictors,
        encoder_optimizer=build_optimizer(cfg.optimizer, encoder.parameters()),
        predictor_optimizer=build_optimizer(cfg.optimizer, predictor_params),
        selection=selection,
        discarded=discarded,
        cosines=cosines,
    )


def projector_targets(state: TrainState, x: Tensor) -> List[Tensor]:
    """Frozen projector outputs for a batch, in head order."""
    if state.workers > 1:
        with ThreadPoolExecutor(max_workers=state.workers) as pool:
            return list(pool.map(lambda proj: proj(x), state.projectors))
    return [proj(x) for proj in state.projectors]


def _set_phase(state: TrainState, encoder: bool, predictors: bool) -> None:
    state.encoder.set_trainable(encoder)
    for head in state.predictors:
        head.set_trainable(predictors)


def _batch_loss(
    state: TrainState, x: Tensor, batch_index: int, encoder_grad: bool
) -> Tensor:
    """Forward one batch through all heads and check the loss is finite.

    Raises:
        NumericalError: If the loss is NaN or Inf.
    """
    targets = projector_targets(state, x)
    if encoder_grad:
        z = state.encoder(x)
    else:
        with no_grad():
            z = state.encoder(x)
    predictions = [head(z) for head in state.predictors]
    loss = bbt_loss(targets, predictions, state.bbt)
    if not math.isfinite(loss.item()):
        current_tape().clear()
        breakdown = bbt_breakdown(targets, predictions, state.bbt)
        logger.error(
            "Non-finite loss at epoch %d batch %d: %s",
            state.epoch,
            batch_index,
            breakdown,
        )
        raise NumericalError(
            "Non-finite loss",
            f"epoch {state.epoch}, batch {batch_index}",
            batch_index=batch_index,
            breakdown=breakdown,
        )
    return loss


def _mean(losses: List[float], fallback: float) -> float:
    return float(np.mean(losses)) if losses else fallback


def e_step_epoch(state: TrainState, dataset: Dataset) -> float:
    """One encoder pass; predictors and projectors are held fixed.

    Returns:
        The mean batch loss (the last known loss if no update was allowed).
    """
    cfg = state.config.train
    _set_phase(state, encoder=True, predictors=False)
    losses = []
    for b, batch in enumerate(
        batches(dataset, cfg.batch_size, cfg.seed, state.epoch, stream="e_step")
    ):
        if state.budget_exhausted:
            break
        loss = _batch_loss(state, batch.features, b, encoder_grad=True)
        state.encoder_optimizer.zero_grad()
        backward(loss)
        state.encoder_optimizer.step()
        state.step += 1
        losses.append(loss.item())
    state.encoder.zero_grad()
    state.last_loss = _mean(losses, state.last_loss)
    return state.last_loss


def m_step_epochs(state: TrainState, dataset: Dataset) -> float:
    """M predictor passes; the encoder and projectors are held fixed.

    Returns:
        The mean loss of the final pass, or the last known loss when M == 0.
    """
    cfg = state.config.train
    if cfg.predictor_epochs == 0:
        return state.last_loss
    if cfg.reset_predictor_optimizer:
        state.predictor_optimizer.reset()
    _set_phase(state, encoder=False, predictors=True)
    losses: List[float] = []
    for p in range(cfg.predictor_epochs):
        losses = []
        stream = f"m_step.{p}"
        for b, batch in enumerate(
            batches(dataset, cfg.batch_size, cfg.seed, state.epoch, stream=stream)
        ):
            loss = _batch_loss(state, batch.features, b, encoder_grad=False)
            state.predictor_optimizer.zero_grad()
            backward(loss)
            state.predictor_optimizer.step()
            losses.append(loss.item())
    _set_phase(state, encoder=True, predictors=False)
    state.last_loss = _mean(losses, state.last_loss)
    return state.last_loss


def interleaved_epoch(state: TrainState, dataset: Dataset) -> Tuple[float, float]:
    """One pass in `batch` or `joint` alternation mode.

    `batch`: per mini-batch, one encoder step then one predictor step.
    `joint`: per mini-batch, one backward pass updating both groups.

    Returns:
        (mean encoder-phase loss, mean predictor-phase loss).
    """
    cfg = state.config.train
    joint = cfg.alternation == "joint"
    e_losses: List[float] = []
    m_losses: List[float] = []
    for b, batch in enumerate(
        batches(dataset, cfg.batch_size, cfg.seed, state.epoch, stream="interleaved")
    ):
        if state.budget_exhausted:
            break
        if joint:
            _set_phase(state, encoder=True, predictors=True)
            loss = _batch_loss(state, batch.features, b, encoder_grad=True)
            state.encoder_optimizer.zero_grad()
            state.predictor_optimizer.zero_grad()
            backward(loss)
            state.encoder_optimizer.step()
            state.predictor_optimizer.step()
            e_losses.append(loss.item())
            m_losses.append(loss.item())
        else:
            _set_phase(state, encoder=True, predictors=False)
            loss = _batch_loss(state, batch.features, b, encoder_grad=True)
            state.encoder_optimizer.zero_grad()
            backward(loss)
            state.encoder_optimizer.step()
            e_losses.append(loss.item())
            _set_phase(state, encoder=False, predictors=True)
            loss = _batch_loss(state, batch.features, b, encoder_grad=False)
            state.predictor_optimizer.zero_grad()
            backward(loss)
            state.predictor_optimizer.step()
            m_losses.append(loss.item())
        state.step += 1
    _set_phase(state, encoder=True, predictors=False)
    e_loss = _mean(e_losses, state.last_loss)
    state.last_loss = _mean(m_losses, e_loss)
    return e_loss, state.last_loss


def phase_violations(history: Sequence[PhaseRecord]) -> List[str]:
    """Describe every phase that changed a parameter group it does not own.

    Projectors must never change; an E-step may change only the encoder and
    an M-step only the predictors. Interleaved phases may change both
    trainable groups.
    """
    problems = []
    for prev, cur in zip(history, history[1:]):
        where = f"epoch {cur.epoch} {cur.phase}"
        if cur.projector_digest != prev.projector_digest:
            problems.append(f"{where}: projector parameters changed")
        if cur.phase == "e_step" and cur.predictor_digest != prev.predictor_digest:
            problems.append(f"{where}: predictor parameters changed")
        if cur.phase == "m_step" and cur.encoder_digest != prev.encoder_digest:
            problems.append(f"{where}: encoder parameters changed")
    return problems


def train(
    state: TrainState,
    dataset: Dataset,
    training_log: Optional[TrainingLog] = None,
    on_eval: Optional[EpochCallback] = None,
) -> TrainState:
    """Run the remaining outer epochs of `state.config.train`.

    Args:
        state: State from `build_state` or a restored checkpoint.
        dataset: Training split.
        training_log: Receives one TSV row per epoch.
        on_eval: Called every `eval_every` epochs (probing and intermediate
            checkpoints).

    Returns:
        The same state, advanced.

    Raises:
        NumericalError: On a non-finite loss or gradient.
        GradientError: If a phase changed parameters it does not own.
    """
    cfg = state.config.train
    while state.epoch < cfg.train_epochs and not state.budget_exhausted:
        started = time.perf_counter()
        first = len(state.history) - 1
        if cfg.alternation == "epoch":
            e_loss = e_step_epoch(state, dataset)
            state.record_phase("e_step", e_loss)
            m_loss = m_step_epochs(state, dataset)
            state.record_phase("m_step", m_loss)
        else:
            e_loss, m_loss = interleaved_epoch(state, dataset)
            state.record_phase(cfg.alternation, m_loss)
        problems = phase_violations(state.history[first:])
        if problems:
            raise GradientError("Phase isolation violated", "; ".join(problems))
        state.e_losses.append(e_loss)
        state.m_losses.append(m_loss)
        state.epoch += 1
        elapsed = time.perf_counter() - started
        if training_log is not None:
            training_log.row(state.epoch, e_loss, m_loss, elapsed)
        logger.debug(
            "Epoch %d: e_loss=%.6f m_loss=%.6f (%.2fs)",
            state.epoch,
            e_loss,
            m_loss,
            elapsed,
        )
        if on_eval is not None and cfg.eval_every and state.epoch % cfg.eval_every == 0:
            on_eval(state)
    if state.budget_exhausted:
        logger.info("Stopped after %d encoder updates (max_steps)", state.step)
    return state

