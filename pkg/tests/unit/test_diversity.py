"""Tests for projector signatures and diverse selection."""

import math
from typing import List

import numpy as np
import pytest

from lfr_tabular.diversity import (
    ProjectorSignature,
    compute_signature,
    compute_signatures,
    exhaustive_select,
    select_diverse,
    select_projectors,
    signature_cosines,
    signature_from_outputs,
    subset_log_det,
)
from lfr_tabular.errors import DegenerateSignatureError, SelectionError
from lfr_tabular.nn import InitSpec, ProjectorModel
from lfr_tabular.rng import derive_seed
from lfr_tabular.tensor import Tensor


def signatures_from(vectors: np.ndarray, batch_hash: int = 1) -> List[ProjectorSignature]:
    """Wrap unit-normalized rows as signatures indexed by position."""
    rows = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    return [ProjectorSignature(row, i, batch_hash) for i, row in enumerate(rows)]


def hidden_orthogonal_instance(rng: np.random.Generator, n: int, k: int):
    """K orthonormal signatures shuffled among N-K near-duplicates.

    Each duplicate has cosine >= 0.99 to one orthogonal member; its remaining
    component lies in the complement of the orthogonal members.

    Returns:
        (signatures, positions of the orthogonal members, group of every row).
    """
    dim = 24
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    members, complement = basis[:, :k].T, basis[:, k:]
    rows, groups = list(members), list(range(k))
    for _ in range(n - k):
        g = int(rng.integers(k))
        c = rng.uniform(0.99, 0.999)
        noise = complement @ rng.standard_normal(dim - k)
        noise /= np.linalg.norm(noise)
        rows.append(c * members[g] + math.sqrt(1.0 - c * c) * noise)
        groups.append(g)
    order = rng.permutation(n)
    vectors = np.stack(rows)[order]
    members_at = [int(np.flatnonzero(order == g)[0]) for g in range(k)]
    return signatures_from(vectors), members_at, [groups[i] for i in order]


class TestSignatures:
    """Signature construction."""

    def test_unit_norm_and_length(self, rng: np.random.Generator) -> None:
        sig = signature_from_outputs(Tensor(rng.standard_normal((5, 3))), 0, 1, 1e-12)
        assert sig.vector.shape == (25,)
        assert np.linalg.norm(sig.vector) == pytest.approx(1.0)

    def test_scale_invariant(self, rng: np.random.Generator) -> None:
        out = rng.standard_normal((4, 3))
        a = signature_from_outputs(Tensor(out), 0, 1, 1e-12)
        b = signature_from_outputs(Tensor(7.5 * out), 0, 1, 1e-12)
        np.testing.assert_allclose(a.vector, b.vector, atol=1e-6)

    def test_zero_outputs_are_degenerate(self) -> None:
        with pytest.raises(DegenerateSignatureError, match="zero"):
            signature_from_outputs(Tensor(np.zeros((4, 3))), 3, 1, 1e-12)

    def test_needs_two_rows(self) -> None:
        with pytest.raises(SelectionError, match="at least 2 rows"):
            signature_from_outputs(Tensor(np.ones((1, 3))), 0, 1, 1e-12)

    def test_single_projector_signature(self, rng: np.random.Generator) -> None:
        projector = ProjectorModel.build(3, 4, InitSpec(seed=derive_seed(2, "p")), hidden=8)
        batch = Tensor(rng.standard_normal((6, 3)))
        sig = compute_signature(projector, batch, projector_index=7)
        expected = signature_from_outputs(projector(batch), 7, sig.probe_batch_hash, 1e-12)
        assert sig.projector_index == 7
        np.testing.assert_array_equal(sig.vector, expected.vector)
        again = compute_signature(projector, Tensor(batch.data.copy()))
        assert again.probe_batch_hash == sig.probe_batch_hash

    def test_degenerate_candidates_discarded(self, rng: np.random.Generator) -> None:
        live = [
            ProjectorModel.build(3, 2, InitSpec(seed=derive_seed(0, "p", i)), hidden=8)
            for i in range(3)
        ]
        widths = live[0].widths
        dead = ProjectorModel.from_arrays(
            widths,
            {k: np.zeros_like(v) for k, v in live[0].state_arrays().items()},
            InitSpec(),
        )
        batch = Tensor(rng.standard_normal((6, 3)))
        valid, discarded = compute_signatures([live[0], dead, live[1], live[2]], batch)
        assert discarded == [1]
        assert [s.projector_index for s in valid] == [0, 2, 3]

    def test_threaded_signatures_match_sequential(self, rng: np.random.Generator) -> None:
        projectors = [
            ProjectorModel.build(3, 4, InitSpec(seed=derive_seed(5, "p", i)), hidden=8)
            for i in range(6)
        ]
        batch = Tensor(rng.standard_normal((5, 3)))
        seq, _ = compute_signatures(projectors, batch, workers=1)
        par, _ = compute_signatures(projectors, batch, workers=3)
        for a, b in zip(seq, par):
            assert a.projector_index == b.projector_index
            np.testing.assert_array_equal(a.vector, b.vector)


class TestGreedySelection:
    """Greedy MAP selection."""

    def test_toy_instance(self) -> None:
        h = math.sqrt(0.5)
        sigs = signatures_from(np.array([[1.0, 0, 0], [0, 1.0, 0], [h, h, 0]]))
        result = select_diverse(sigs, 2)
        assert result.chosen_indices == [0, 1]
        assert result.log_det == pytest.approx(0.0, abs=1e-12)
        assert exhaustive_select(sigs, 2).chosen_indices == [0, 1]

    def test_single_pick_ties_go_to_lowest_index(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((5, 9)))
        result = select_diverse(sigs, 1)
        assert result.chosen_indices == [0]
        assert result.log_det == pytest.approx(0.0, abs=1e-12)

    def test_log_det_matches_slogdet(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((10, 16)))
        result = select_diverse(sigs, 4)
        assert result.log_det == pytest.approx(
            subset_log_det(sigs, result.chosen_indices), abs=1e-9
        )
        assert sorted(result.selection_order) == result.chosen_indices

    def test_invariant_to_presentation_order(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((12, 16)))
        shuffled = [sigs[i] for i in rng.permutation(len(sigs))]
        assert select_diverse(sigs, 4).chosen_indices == select_diverse(
            shuffled, 4
        ).chosen_indices

    def test_singular_set_filled_by_index(self) -> None:
        sigs = signatures_from(np.ones((3, 4)))
        result = select_diverse(sigs, 2)
        assert result.singular
        assert result.chosen_indices == [0, 1]
        assert result.log_det == -math.inf
        assert result.to_dict()["log_det"] is None

    def test_k_out_of_range(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((3, 4)))
        with pytest.raises(SelectionError, match="Cannot select"):
            select_diverse(sigs, 4)
        with pytest.raises(SelectionError):
            select_diverse(sigs, 0)

    def test_mixed_probe_batches_rejected(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((3, 4)))
        sigs[2] = ProjectorSignature(sigs[2].vector, 2, probe_batch_hash=99)
        with pytest.raises(SelectionError, match="different probe batches"):
            select_diverse(sigs, 2)

    def test_matches_exhaustive_on_hidden_orthogonal_sets(self) -> None:
        rng = np.random.default_rng(2024)
        for _ in range(50):
            k = int(rng.integers(2, 5))
            n = int(rng.integers(k + 1, 13))
            sigs, members, groups = hidden_orthogonal_instance(rng, n, k)
            greedy = select_diverse(sigs, k)
            oracle = exhaustive_select(sigs, k)
            assert oracle.log_det == pytest.approx(0.0, abs=1e-9)
            assert abs(greedy.log_det - oracle.log_det) <= 1e-9
            assert sorted(groups[i] for i in greedy.chosen_indices) == list(range(k))
            assert subset_log_det(sigs, members) == pytest.approx(0.0, abs=1e-9)

    def test_beats_random_subsets(self) -> None:
        rng = np.random.default_rng(7)
        n, k = 40, 6
        for _ in range(10):
            sigs = [
                signature_from_outputs(Tensor(rng.standard_normal((8, 4))), i, 1, 1e-12)
                for i in range(n)
            ]
            greedy = select_diverse(sigs, k)
            random_dets = [
                subset_log_det(sigs, sorted(rng.choice(n, size=k, replace=False)))
                for _ in range(1000)
            ]
            assert greedy.log_det >= np.percentile(random_dets, 99)

    def test_exhaustive_never_below_greedy(self) -> None:
        rng = np.random.default_rng(11)
        for _ in range(20):
            sigs = signatures_from(rng.standard_normal((8, 5)))
            assert (
                exhaustive_select(sigs, 3).log_det
                >= select_diverse(sigs, 3).log_det - 1e-9
            )

    def test_exhaustive_budget(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((10, 4)))
        with pytest.raises(SelectionError, match="over budget"):
            exhaustive_select(sigs, 5, budget=100)


class TestStrategies:
    """Baseline selection strategies."""

    def test_first(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((6, 8)))
        result = select_projectors(sigs, 3, "first")
        assert result.chosen_indices == [0, 1, 2]
        assert result.strategy == "first"

    def test_random_is_seeded(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((10, 8)))
        a = select_projectors(sigs, 3, "random", rng=np.random.default_rng(3))
        b = select_projectors(sigs, 3, "random", rng=np.random.default_rng(3))
        assert a.chosen_indices == b.chosen_indices
        assert len(set(a.chosen_indices)) == 3

    def test_random_needs_generator(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((4, 8)))
        with pytest.raises(SelectionError, match="generator"):
            select_projectors(sigs, 2, "random")

    def test_unknown_strategy(self, rng: np.random.Generator) -> None:
        sigs = signatures_from(rng.standard_normal((4, 8)))
        with pytest.raises(SelectionError, match="Unknown"):
            select_projectors(sigs, 2, "best")


def test_signature_cosines_unit_diagonal(rng: np.random.Generator) -> None:
    sigs = signatures_from(rng.standard_normal((5, 8)))
    cosines = signature_cosines(sigs, [0, 2, 4])
    assert cosines.shape == (3, 3)
    np.testing.assert_allclose(np.diag(cosines), 1.0)
