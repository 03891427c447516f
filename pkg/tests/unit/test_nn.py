"""Tests for the encoder, projector and predictor networks."""

import numpy as np
import pytest

from lfr_tabular.errors import GradientError, ShapeError
from lfr_tabular.nn import (
    DenseLayer,
    EncoderModel,
    FeedForward,
    InitSpec,
    PredictorModel,
    ProjectorModel,
    apply_weight_dropout,
    init_beta,
    init_default_uniform,
)
from lfr_tabular.rng import derive_seed, make_generator
from lfr_tabular.tensor import Tensor, current_tape, gradcheck, square


def test_encoder_widths_and_names() -> None:
    """Hidden layers use `hidden` units and the last layer emits latent_dim."""
    encoder = EncoderModel.build(5, 8, hidden=16, depth=3, rng=make_generator(0, "e"))
    assert encoder.widths == [5, 16, 16, 8]
    assert encoder.latent_dim == 8
    names = [name for name, _ in encoder.named_parameters()]
    assert names[:2] == ["layers.0.weight", "layers.0.bias"]
    assert encoder.layers[0].weight.name == "encoder.layers.0.weight"


def test_last_layer_is_linear() -> None:
    encoder = EncoderModel.build(3, 4, hidden=6, depth=2)
    assert [layer.activation for layer in encoder.layers] == ["relu", "none"]


def test_input_width_is_checked() -> None:
    encoder = EncoderModel.build(3, 4, hidden=6, depth=2)
    with pytest.raises(ShapeError, match="input width"):
        encoder(Tensor(np.ones((2, 5))))


def test_mismatched_layers_rejected() -> None:
    with pytest.raises(ShapeError, match="widths"):
        FeedForward([DenseLayer(3, 4), DenseLayer(5, 2)])


def test_default_uniform_bounds() -> None:
    encoder = EncoderModel.build(16, 4, hidden=32, depth=2, rng=make_generator(1, "e"))
    first = encoder.layers[0]
    bound = 1.0 / np.sqrt(16)
    assert np.all(np.abs(first.weight.data) <= bound)
    assert np.all(np.abs(first.bias.data) <= bound)


class TestProjector:
    """Frozen random projectors."""

    def build(self, scheme: str = "default_uniform", seed: int = 7) -> ProjectorModel:
        spec = InitSpec(scheme=scheme, dropout_rate=0.4, seed=derive_seed(seed, "p", 0))
        return ProjectorModel.build(6, 5, spec, hidden=32, depth=2)

    def test_same_seed_same_parameters(self) -> None:
        assert self.build().digest() == self.build().digest()

    def test_different_seed_different_parameters(self) -> None:
        assert self.build(seed=1).digest() != self.build(seed=2).digest()

    def test_parameters_are_read_only(self) -> None:
        projector = self.build()
        assert projector.frozen
        with pytest.raises(ValueError):
            projector.layers[0].weight.data[0, 0] = 1.0

    def test_cannot_be_made_trainable(self) -> None:
        with pytest.raises(GradientError, match="frozen"):
            self.build().set_trainable(True)

    def test_forward_records_nothing(self) -> None:
        out = self.build()(Tensor(np.ones((4, 6))))
        assert not out.requires_grad
        assert len(current_tape()) == 0

    def test_beta_weights_in_unit_interval_with_zero_bias(self) -> None:
        projector = self.build("beta")
        for layer in projector.layers:
            assert np.all(np.abs(layer.weight.data) <= 1.0)
            assert np.all(layer.bias.data == 0.0)

    def test_beta_with_dropout_zeros_weights(self) -> None:
        projector = self.build("beta_with_dropout")
        zero_share = np.mean(projector.layers[0].weight.data == 0.0)
        assert 0.25 < zero_share < 0.55

    def test_rebuild_from_arrays(self) -> None:
        projector = self.build()
        copy = ProjectorModel.from_arrays(
            projector.widths, projector.state_arrays(), projector.init_spec
        )
        assert copy.digest() == projector.digest()
        assert copy.frozen

    def test_dropout_rate_validated(self) -> None:
        with pytest.raises(ValueError):
            InitSpec(dropout_rate=1.0)


def test_predictor_shapes() -> None:
    linear = PredictorModel.build(8, 3)
    hidden = PredictorModel.build(8, 3, hidden=4)
    assert linear.widths == [8, 3]
    assert hidden.widths == [8, 4, 3]


def test_load_state_arrays_checks_shapes() -> None:
    head = PredictorModel.build(4, 2)
    arrays = head.state_arrays()
    arrays["layers.0.weight"] = np.zeros((2, 4))
    with pytest.raises(ShapeError, match="shape mismatch"):
        head.load_state_arrays(arrays)


def test_set_trainable_clears_gradients() -> None:
    head = PredictorModel.build(4, 2, rng=make_generator(0, "p"))
    head(Tensor(np.ones((3, 4)))).sum().backward()
    assert head.layers[0].weight.grad is not None
    head.set_trainable(False)
    assert all(p.grad is None and not p.requires_grad for p in head.parameters())


def as_float64(*models: FeedForward) -> None:
    """Switch model parameters to float64 for finite-difference checks."""
    for model in models:
        for p in model.parameters():
            p.data = p.data.astype(np.float64)


@pytest.mark.parametrize("seed", range(5))
def test_encoder_and_predictor_gradcheck(seed: int) -> None:
    rng = np.random.default_rng(seed)
    encoder = EncoderModel.build(5, 4, hidden=7, depth=3, rng=make_generator(seed, "e"))
    head = PredictorModel.build(4, 3, hidden=6, rng=make_generator(seed, "p"))
    as_float64(encoder, head)
    x = Tensor(rng.standard_normal((6, 5)), dtype=np.float64)

    def fn() -> Tensor:
        return square(head(encoder(x))).sum()

    params = encoder.parameters() + head.parameters()
    assert gradcheck(fn, params, h=1e-6) < 1e-5


def test_encoder_rows_are_independent() -> None:
    """A row encodes identically alone and inside a batch of 8."""
    rng = np.random.default_rng(4)
    encoder = EncoderModel.build(6, 5, hidden=12, depth=3)
    # Dyadic values keep every product and partial sum exact in float32.
    for p in encoder.parameters():
        p.data[...] = rng.integers(-4, 5, size=p.shape) / 8.0
    batch = Tensor(rng.integers(-3, 4, size=(8, 6)) / 4.0)
    full = encoder(batch).data
    for i in range(8):
        single = encoder(Tensor(batch.data[i : i + 1])).data
        np.testing.assert_array_equal(single[0], full[i])


class TestInitDistributions:
    """Monte Carlo checks of the initialization schemes over 1e5 weights."""

    @staticmethod
    def layer() -> DenseLayer:
        return DenseLayer(16, 6250)

    def test_default_uniform_fills_its_bound(self) -> None:
        layer = self.layer()
        init_default_uniform(layer, make_generator(0, "uniform"))
        weights = layer.weight.data.astype(np.float64)
        bound = 1.0 / np.sqrt(16)
        assert weights.size == 100_000
        assert np.all(np.abs(weights) <= bound)
        assert np.max(np.abs(weights)) > 0.99 * bound
        assert abs(weights.mean()) < 0.01 * bound
        assert weights.var() == pytest.approx(bound**2 / 3, rel=0.02)

    def test_beta_is_u_shaped(self) -> None:
        layer = self.layer()
        init_beta(layer, make_generator(0, "beta"))
        weights = layer.weight.data
        assert np.all(np.abs(weights) <= 1.0)
        tails = np.mean(np.abs(weights) >= 0.8)
        centre = np.mean(np.abs(weights) <= 0.1)
        assert tails > centre
        # Arcsine law: P(|w| >= 0.8) ~ 0.410, P(|w| <= 0.1) ~ 0.064.
        assert tails == pytest.approx(0.410, abs=0.01)
        assert centre == pytest.approx(0.064, abs=0.005)

    def test_weight_dropout_fraction(self) -> None:
        layer = self.layer()
        layer.weight.data[...] = 1.0
        apply_weight_dropout(layer, 0.4, make_generator(0, "dropout"))
        assert 0.39 <= np.mean(layer.weight.data == 0.0) <= 0.41
