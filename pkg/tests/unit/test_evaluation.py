"""Tests for embedding and the logistic-regression probe."""

import json
from pathlib import Path
from typing import Tuple

import numpy as np
import pytest

from lfr_tabular.config import ModelSettings, ProbeSettings
from lfr_tabular.data import Dataset, make_synthetic_clusters
from lfr_tabular.errors import DataError, ShapeError
from lfr_tabular.evaluation import (
    EvalSummary,
    accuracy,
    embed_dataset,
    evaluate,
    evaluate_seeds,
    identity_encoder,
    random_init_encoder,
    train_probe,
)
from lfr_tabular.nn import EncoderModel
from lfr_tabular.tensor import Tensor, current_tape


@pytest.fixture
def probe_cfg() -> ProbeSettings:
    """Probe settings with a tight iteration cap."""
    return ProbeSettings(max_iter=500)


def test_identity_encoder_returns_features(synthetic_splits: Tuple[Dataset, Dataset]) -> None:
    train, _ = synthetic_splits
    emb = embed_dataset(identity_encoder(train.dim), train, chunk_size=7)
    np.testing.assert_allclose(emb.data, train.features.data, rtol=1e-6)


def test_embedding_records_no_gradients(synthetic_splits: Tuple[Dataset, Dataset]) -> None:
    train, _ = synthetic_splits
    encoder = random_init_encoder(train.dim, ModelSettings(latent_dim=4, encoder_hidden=8), 0)
    emb = embed_dataset(encoder, train, chunk_size=32)
    assert emb.shape == (train.n, 4)
    assert len(current_tape()) == 0


def test_embedding_width_mismatch(synthetic_splits: Tuple[Dataset, Dataset]) -> None:
    train, _ = synthetic_splits
    with pytest.raises(ShapeError, match="width"):
        embed_dataset(EncoderModel.build(train.dim + 1, 4, hidden=4, depth=2), train)


def test_random_init_encoder_is_seeded() -> None:
    model = ModelSettings(latent_dim=4, encoder_hidden=8, encoder_depth=3)
    a = random_init_encoder(5, model, seed=1)
    assert a.digest() == random_init_encoder(5, model, seed=1).digest()
    assert a.digest() != random_init_encoder(5, model, seed=2).digest()
    assert a.widths == [5, 8, 8, 4]


class TestProbe:
    """Probe fitting."""

    def test_separable_data(self, probe_cfg: ProbeSettings) -> None:
        x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        probe = train_probe(Tensor(x), np.array([0, 0, 1, 1]), probe_cfg)
        np.testing.assert_array_equal(probe.predict(Tensor(x)), [0, 0, 1, 1])

    def test_converges_on_regularized_problem(self, rng: np.random.Generator) -> None:
        x = rng.standard_normal((60, 3))
        labels = (x[:, 0] + 0.5 * rng.standard_normal(60) > 0).astype(int)
        probe = train_probe(Tensor(x), labels, ProbeSettings(l2=0.1, tol=1e-3, max_iter=5000))
        assert probe.converged
        assert probe.iterations < 5000

    def test_standardizes_with_train_statistics(self, rng: np.random.Generator) -> None:
        x = rng.standard_normal((40, 2)) * [10.0, 0.0] + [5.0, 3.0]
        probe = train_probe(Tensor(x), (x[:, 0] > 5.0).astype(int), ProbeSettings())
        np.testing.assert_allclose(probe.mean, [x[:, 0].mean(), 3.0], rtol=1e-5)
        assert probe.scale[1] == 1.0  # constant column

    def test_single_class_rejected(self, probe_cfg: ProbeSettings) -> None:
        with pytest.raises(DataError, match="two classes"):
            train_probe(Tensor(np.ones((4, 2))), np.zeros(4, dtype=int), probe_cfg)

    def test_labels_out_of_range(self, probe_cfg: ProbeSettings) -> None:
        with pytest.raises(DataError, match="out of range"):
            train_probe(Tensor(np.ones((4, 2))), np.array([0, 1, 2, 1]), probe_cfg, num_classes=2)

    def test_width_checked_at_prediction(self, probe_cfg: ProbeSettings) -> None:
        probe = train_probe(Tensor(np.eye(4)), np.array([0, 1, 0, 1]), probe_cfg)
        with pytest.raises(ShapeError):
            probe.predict(Tensor(np.ones((2, 3))))


def test_accuracy_is_exact_fraction() -> None:
    assert accuracy(np.array([0, 1, 1]), np.array([0, 1, 0])) == 2 / 3


class TestEvaluate:
    """End-to-end evaluation reports."""

    def test_raw_features_beat_chance(
        self, synthetic_splits: Tuple[Dataset, Dataset], probe_cfg: ProbeSettings
    ) -> None:
        train, test = synthetic_splits
        report = evaluate(identity_encoder(train.dim), train, test, probe_cfg, encoder_source="raw")
        assert report.accuracy > 0.7
        assert report.n_train == train.n and report.n_test == test.n
        assert set(report.per_class) <= {"0", "1", "2"}
        assert report.encoder_source == "raw"

    def test_empty_test_split(
        self, synthetic_splits: Tuple[Dataset, Dataset], probe_cfg: ProbeSettings
    ) -> None:
        train, _ = synthetic_splits
        empty = Dataset(Tensor(np.zeros((0, train.dim))), np.zeros(0, dtype=np.int64))
        with pytest.raises(DataError, match="empty"):
            evaluate(identity_encoder(train.dim), train, empty, probe_cfg)

    def test_seeds_summary(
        self,
        tmp_path: Path,
        synthetic_splits: Tuple[Dataset, Dataset],
        probe_cfg: ProbeSettings,
    ) -> None:
        train, test = synthetic_splits
        summary = evaluate_seeds(
            identity_encoder(train.dim),
            train,
            test,
            probe_cfg,
            seeds=[0, 1, 2],
            encoder_source="raw",
            checkpoint_digest="abc",
        )
        assert len(summary.reports) == 3
        assert summary.mean == pytest.approx(np.mean(summary.accuracies))
        payload = json.loads(summary.save(tmp_path / "eval.json").read_text())
        assert payload["seeds"] == [0, 1, 2]
        assert payload["checkpoint_digest"] == "abc"
        assert payload["std_accuracy"] >= 0.0

    def test_empty_summary(self) -> None:
        summary = EvalSummary()
        assert summary.mean == 0.0
        assert summary.to_dict()["reports"] == []


class TestProbeInvariances:
    """Behaviour of the probe under transformed training data."""

    def test_duplicated_training_rows_give_same_predictions(
        self, synthetic_splits: Tuple[Dataset, Dataset]
    ) -> None:
        train, test = synthetic_splits
        cfg = ProbeSettings(l2=1e-2, max_iter=500)
        doubled = Tensor(np.concatenate([train.features.data, train.features.data]))
        once = train_probe(train.features, train.labels, cfg)
        twice = train_probe(doubled, np.concatenate([train.labels, train.labels]), cfg)
        np.testing.assert_array_equal(
            once.predict(test.features), twice.predict(test.features)
        )

    @pytest.mark.parametrize("seed", range(3))
    def test_shuffled_labels_score_near_chance(self, seed: int) -> None:
        train, test = make_synthetic_clusters(3000, 4, 4, 2, 4.0, seed=seed)
        shuffled = Dataset(
            train.features, np.random.default_rng(seed).permutation(train.labels)
        )
        report = evaluate(
            identity_encoder(train.dim), shuffled, test, ProbeSettings(max_iter=500)
        )
        assert 0.4 < report.accuracy < 0.6

    def test_encoder_is_left_untouched(
        self, synthetic_splits: Tuple[Dataset, Dataset], probe_cfg: ProbeSettings
    ) -> None:
        train, test = synthetic_splits
        encoder = random_init_encoder(
            train.dim, ModelSettings(latent_dim=4, encoder_hidden=8), 0
        )
        before = encoder.digest()
        evaluate(encoder, train, test, probe_cfg)
        assert encoder.digest() == before
        assert all(p.grad is None for p in encoder.parameters())
