"""Command orchestration for lfr-tabular.

`RunController` ties configuration, data, training, evaluation and the run
archive together. Each public method implements one command of the CLI and
raises `LfrError` subclasses; turning them into exit codes is the CLI's job.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from lfr_tabular.checkpoint import (
    AbstractCheckpointStore,
    Checkpoint,
    FileSystemCheckpointStore,
    RunArchiver,
    encoder_from_checkpoint,
)
from lfr_tabular.config import ConfigManager, RunConfig
from lfr_tabular.data import Dataset, FeatureMeta, apply_feature_meta, load_dataset
from lfr_tabular.diversity import (
    EXHAUSTIVE_BUDGET,
    SelectionResult,
    compute_signatures,
    exhaustive_select,
    select_projectors,
    signature_cosines,
)
from lfr_tabular.errors import DataError, SelectionError
from lfr_tabular.evaluation import (
    EncoderSource,
    EvalSummary,
    evaluate,
    evaluate_seeds,
    identity_encoder,
    random_init_encoder,
)
from lfr_tabular.logger import TrainingLog
from lfr_tabular.nn import FeedForward
from lfr_tabular.pipeline import (
    EpochCallback,
    TrainState,
    build_candidates,
    build_state,
    probe_batch,
    train,
)
from lfr_tabular.rng import make_generator

logger = logging.getLogger(__name__)

# Absolute log|det| tolerance when comparing greedy and exhaustive selection.
MATCH_TOLERANCE = 1e-9


@dataclass
class PretrainResult:
    """What `pretrain` produced."""

    state: TrainState
    checkpoint: Checkpoint
    checkpoint_path: Path


@dataclass
class SelectDebugReport:
    """Greedy selection next to the exhaustive optimum."""

    greedy: SelectionResult
    cosines: np.ndarray
    discarded: List[int] = field(default_factory=list)
    exhaustive: Optional[SelectionResult] = None
    combinations: int = 0

    @property
    def greedy_matches(self) -> Optional[bool]:
        """None when the exhaustive search was over budget."""
        if self.exhaustive is None:
            return None
        a, b = self.greedy.log_det, self.exhaustive.log_det
        if math.isinf(a) or math.isinf(b):
            return a == b
        return abs(a - b) <= MATCH_TOLERANCE

    def lines(self) -> List[str]:
        """Human-readable report."""
        out = [
            f"candidates: {self.greedy.candidate_count} (discarded: {self.discarded})",
            f"strategy: {self.greedy.strategy}",
            f"chosen: {self.greedy.chosen_indices}",
            f"log_det: {self.greedy.log_det:.6f}",
            "signature cosines:",
        ]
        out.extend("  " + " ".join(f"{v:7.4f}" for v in row) for row in self.cosines)
        if self.exhaustive is None:
            out.append(
                f"greedy==exhaustive: skipped (C(N, K) = {self.combinations} "
                f"> {EXHAUSTIVE_BUDGET})"
            )
        else:
            out.append(f"exhaustive chosen: {self.exhaustive.chosen_indices}")
            out.append(f"exhaustive log_det: {self.exhaustive.log_det:.6f}")
            out.append(f"greedy==exhaustive: {str(self.greedy_matches).lower()}")
        return out


class RunController:
    """Runs the pretrain, probe and select-debug commands.

    Attributes:
        config_manager: Source of the validated run configuration.
        archiver: Writes checkpoints and reports into the run directory.
    """

    def __init__(
        self,
        config_manager: ConfigManager,
        store: Optional[AbstractCheckpointStore] = None,
    ) -> None:
        """Initialize the controller.

        Args:
            config_manager: The configuration manager instance.
            store: Checkpoint store; defaults to the output directory.
        """
        self.config_manager = config_manager
        directory = Path(self.config.output.directory)
        self.store = store or FileSystemCheckpointStore(directory)
        self.archiver = RunArchiver(self.store, directory)
        logger.debug("RunController initialized for %s", directory)

    @property
    def config(self) -> RunConfig:
        """The validated configuration."""
        return self.config_manager.config

    def _load_data(
        self, meta: Optional[FeatureMeta] = None
    ) -> Tuple[Dataset, Optional[Dataset]]:
        seed = self.config.train.seed
        if meta is None:
            return load_dataset(self.config.dataset, seed)
        return apply_feature_meta(self.config.dataset, meta, seed)

    def _intermediate_eval(
        self, train_split: Dataset, test_split: Optional[Dataset]
    ) -> EpochCallback:
        def on_eval(state: TrainState) -> None:
            if test_split is not None:
                report = evaluate(
                    state.encoder,
                    train_split,
                    test_split,
                    self.config.probe,
                    seed=self.config.train.seed,
                )
                state.eval_history.append((state.epoch, report.accuracy))
                logger.info(
                    "Epoch %d probe accuracy %.4f", state.epoch, report.accuracy
                )
            self.archiver.archive_checkpoint(
                state,
                f"checkpoint_epoch{state.epoch:04d}.lfr",
                train_split.feature_meta,
            )

        return on_eval

    def pretrain(self, echo: bool = True) -> PretrainResult:
        """Select projectors, train and write the run artifacts.

        Artifacts: effective configuration, feature metadata, selection
        report, TSV training log and the final checkpoint.
        """
        cfg = self.config
        self.archiver.write_config(self.config_manager)
        train_split, test_split = self._load_data()
        meta = train_split.feature_meta
        if meta is not None:
            self.archiver.write_feature_meta(meta)

        state = build_state(cfg, train_split)
        self.archiver.write_selection_report(state)
        training_log = TrainingLog(self.archiver.train_log_path, echo=echo)
        try:
            train(
                state,
                train_split,
                training_log,
                on_eval=self._intermediate_eval(train_split, test_split),
            )
        finally:
            training_log.close()

        checkpoint, path = self.archiver.archive_checkpoint(
            state, cfg.output.checkpoint_name, meta
        )
        logger.info("Pretraining finished after %d epochs", state.epoch)
        return PretrainResult(state, checkpoint, path)

    def _encoder_for(
        self, source: EncoderSource, checkpoint: Checkpoint, dim: int
    ) -> FeedForward:
        if source == "raw":
            return identity_encoder(dim)
        if source == "random-init":
            model = checkpoint.config().model
            return random_init_encoder(dim, model, self.config.train.seed)
        return encoder_from_checkpoint(checkpoint)

    def probe(
        self,
        checkpoint_name: Optional[str] = None,
        source: EncoderSource = "lfr",
        seeds: Optional[int] = None,
    ) -> EvalSummary:
        """Probe the encoder of a checkpoint and write the evaluation report.

        Args:
            checkpoint_name: Checkpoint path or name; defaults to the run's
                final checkpoint.
            source: `lfr` (trained encoder), `random-init` (same architecture,
                fresh parameters) or `raw` (identity encoder).
            seeds: Number of probe seeds; defaults to `probe.seeds`.

        Raises:
            CheckpointError: If the checkpoint is missing or fails verification.
            DataError: If the dataset has no test split.
        """
        cfg = self.config
        self.archiver.write_config(self.config_manager, "probe")
        checkpoint = self.archiver.load_checkpoint(
            checkpoint_name or cfg.output.checkpoint_name
        )
        train_split, test_split = self._load_data(checkpoint.feature_meta)
        if test_split is None:
            raise DataError("Probing needs a test split", "set dataset.test_path")
        encoder = self._encoder_for(source, checkpoint, train_split.dim)
        count = seeds or cfg.probe.seeds
        summary = evaluate_seeds(
            encoder,
            train_split,
            test_split,
            cfg.probe,
            [cfg.train.seed + i for i in range(count)],
            encoder_source=source,
            checkpoint_digest=checkpoint.digest,
        )
        self.archiver.write_json(f"eval_report_{source}.json", summary.to_dict())
        return summary

    def select_debug(self) -> SelectDebugReport:
        """Run candidate generation and selection only, with an exact check.

        Raises:
            SelectionError: If fewer than K candidates are usable.
        """
        cfg = self.config
        self.archiver.write_config(self.config_manager, "select_debug")
        train_split, _ = self._load_data()
        candidates = build_candidates(cfg, train_split.dim)
        batch = probe_batch(train_split, cfg.probe_size, cfg.train.seed)
        workers = 1 if cfg.runtime.deterministic else cfg.runtime.workers
        signatures, discarded = compute_signatures(
            candidates, batch, cfg.selection.eps, workers=workers
        )
        K = cfg.train.K
        if len(signatures) < K:
            raise SelectionError(
                "Too few non-degenerate candidate projectors",
                f"{len(signatures)} valid of {len(candidates)}, need K={K}",
            )
        greedy = select_projectors(
            signatures,
            K,
            cfg.selection.strategy,
            rng=make_generator(cfg.train.seed, "selection"),
        )
        report = SelectDebugReport(
            greedy=greedy,
            cosines=signature_cosines(signatures, greedy.chosen_indices),
            discarded=discarded,
            combinations=math.comb(len(signatures), K),
        )
        if report.combinations <= EXHAUSTIVE_BUDGET:
            report.exhaustive = exhaustive_select(signatures, K)
        return report
