"""Tests for the Adam and SGD optimizers."""

import numpy as np
import pytest

from lfr_tabular.config import OptimizerSettings
from lfr_tabular.errors import NumericalError
from lfr_tabular.optim import SGD, Adam, build_optimizer
from lfr_tabular.tensor import Tensor, square


def quadratic_step(optimizer, param: Tensor) -> None:
    optimizer.zero_grad()
    square(param).sum().backward()
    optimizer.step()


def test_adam_first_step_moves_by_lr() -> None:
    """With bias correction the first Adam step is lr * sign(grad)."""
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    quadratic_step(opt, p)
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-5)
    assert opt.step_count == 1


def test_adam_minimizes_quadratic() -> None:
    p = Tensor([3.0, -1.5], requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(1000):
        quadratic_step(opt, p)
    assert np.max(np.abs(p.data)) < 0.1


def test_zero_learning_rate_leaves_parameters_unchanged() -> None:
    p = Tensor([0.3, 0.7], requires_grad=True)
    before = p.data.copy()
    opt = Adam([p], lr=0.0)
    for _ in range(3):
        quadratic_step(opt, p)
    np.testing.assert_array_equal(p.data, before)


def test_sgd_momentum() -> None:
    p = Tensor([1.0], requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.5)
    quadratic_step(opt, p)  # g = 2, v = 2
    np.testing.assert_allclose(p.data, [0.8], rtol=1e-6)
    quadratic_step(opt, p)  # g = 1.6, v = 0.5 * 2 + 1.6
    np.testing.assert_allclose(p.data, [0.8 - 0.1 * 2.6], rtol=1e-6)


def test_weight_decay_is_coupled() -> None:
    p = Tensor([2.0], requires_grad=True)
    opt = SGD([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0], rtol=1e-6)


def test_parameters_without_gradient_are_skipped() -> None:
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([1.0], requires_grad=True)
    opt = SGD([a, b], lr=0.1)
    a.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert a.data[0] == pytest.approx(0.9)
    assert b.data[0] == 1.0


def test_non_finite_gradient_raises() -> None:
    p = Tensor([1.0], requires_grad=True, name="w")
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NumericalError, match="Non-finite"):
        Adam([p]).step()


def test_state_round_trip_and_reset() -> None:
    p = Tensor([1.0, 2.0], requires_grad=True)
    opt = Adam([p], lr=0.01)
    quadratic_step(opt, p)
    state = opt.state_arrays()
    assert set(state) == {"m.0", "v.0"}
    assert all(v.dtype == np.float32 for v in state.values())

    other = Adam([Tensor([1.0, 2.0], requires_grad=True)], lr=0.01)
    other.load_state_arrays(state)
    np.testing.assert_array_equal(other.m[0], opt.m[0])

    opt.reset()
    assert opt.step_count == 0
    assert not np.any(opt.m[0]) and not np.any(opt.v[0])


def test_build_optimizer_kinds() -> None:
    params = [Tensor([1.0], requires_grad=True)]
    assert isinstance(build_optimizer(OptimizerSettings(), params), Adam)
    sgd = build_optimizer(OptimizerSettings(kind="sgd", lr=0.5, momentum=0.9), params)
    assert isinstance(sgd, SGD)
    assert sgd.momentum == 0.9
