import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deqflow.equilibrium import ModelParams, forward, resolvent
from deqflow.gradients import (
    grad_closed_form,
    grad_finite_diff,
    grad_ift,
    gradcheck,
    loss_and_grad,
    objective,
    relative_error,
)
from deqflow.losses import Dataset, l0_gradient
from tests.helpers import (
    LOGISTIC,
    SQUARE,
    random_binary,
    random_params,
    random_regression,
    rng_for,
)


def instance(seed, m, m_y, kind, n=15, gamma=0.8):
    rng = rng_for(seed)
    p = random_params(rng, m, m_y, gamma)
    if kind == "logistic":
        return p, random_binary(rng, m, n), LOGISTIC
    return p, random_regression(rng, m, n, m_y), SQUARE


def test_zero_readout_kills_grad_A():
    rng = rng_for(0)
    A = rng.standard_normal((4, 4))
    p = ModelParams(A, np.zeros((2, 4)), 0.8)
    data = random_regression(rng, 4, 6, 2)
    for g in (grad_closed_form(p, data, SQUARE), grad_ift(p, data, SQUARE)):
        np.testing.assert_array_equal(g.grad_A, 0.0)
        expected = l0_gradient(np.zeros((2, 4)), data, SQUARE) @ resolvent(p).T
        np.testing.assert_allclose(g.grad_B, expected, atol=1e-12)


def test_zero_residual_gives_zero_gradient():
    rng = rng_for(1)
    p = random_params(rng, 5, 2)
    Phi = rng.standard_normal((5, 9))
    data = Dataset(Phi, forward(p, Phi))
    g = grad_closed_form(p, data, SQUARE)
    np.testing.assert_allclose(g.grad_A, 0.0, atol=1e-10)
    np.testing.assert_allclose(g.grad_B, 0.0, atol=1e-10)


def test_closed_form_matches_finite_differences():
    p, data, spec = instance(2, 6, 2, "square")
    fd = grad_finite_diff(p, data, spec)
    g = grad_closed_form(p, data, spec)
    assert relative_error(g.grad_A, fd.grad_A) <= 1e-6
    assert relative_error(g.grad_B, fd.grad_B) <= 1e-6


def test_ift_agrees_with_closed_form():
    p, data, spec = instance(3, 4, 1, "square", n=8)
    a, b = grad_closed_form(p, data, spec), grad_ift(p, data, spec)
    assert relative_error(a.grad_A, b.grad_A, floor=1e-300) <= 1e-10
    assert relative_error(a.grad_B, b.grad_B, floor=1e-300) <= 1e-10


@given(
    st.integers(0, 500),
    st.sampled_from([1, 2, 3, 5, 8]),
    st.sampled_from([1, 3]),
    st.sampled_from([0.3, 0.8, 0.99]),
)
def test_two_derivations_agree(seed, m, m_y, gamma):
    p, data, spec = instance(seed, m, m_y, "square", n=6, gamma=gamma)
    a, b = grad_closed_form(p, data, spec), grad_ift(p, data, spec)
    scale_A = max(np.abs(a.grad_A).max(), 1e-300)
    scale_B = max(np.abs(a.grad_B).max(), 1e-300)
    assert np.abs(a.grad_A - b.grad_A).max() <= 1e-10 * scale_A
    assert np.abs(a.grad_B - b.grad_B).max() <= 1e-10 * scale_B


def test_small_gamma_grad_B_is_linear_model_gradient():
    rng = rng_for(4)
    p = random_params(rng, 4, 2, gamma=1e-12)
    data = random_regression(rng, 4, 7, 2)
    g = grad_ift(p, data, SQUARE)
    np.testing.assert_allclose(g.grad_B, l0_gradient(p.B, data, SQUARE), rtol=1e-10)


def test_finite_diff_no_samples_is_zero():
    p = random_params(rng_for(5), 3)
    empty = Dataset(np.zeros((3, 0)), np.zeros((1, 0)))
    for method in ("increment", "direct"):
        fd = grad_finite_diff(p, empty, SQUARE, method=method)
        np.testing.assert_array_equal(fd.grad_A, 0.0)
        np.testing.assert_array_equal(fd.grad_B, 0.0)


def test_finite_diff_second_order_in_step():
    # Logistic curvature makes the B direction non-quadratic, so truncation is visible.
    p, data, spec = instance(6, 4, 1, "logistic")
    exact = grad_closed_form(p, data, spec)
    errs = []
    for h in (2e-3, 1e-3):
        fd = grad_finite_diff(p, data, spec, step=h)
        errs.append(np.abs(fd.grad_A - exact.grad_A).max())
    assert 0.2 <= errs[1] / errs[0] <= 0.3


def test_increment_and_direct_finite_differences_agree():
    p, data, spec = instance(7, 5, 3, "square")
    a = grad_finite_diff(p, data, spec, method="increment")
    b = grad_finite_diff(p, data, spec, method="direct")
    scale = np.abs(a.grad_A).max()
    assert np.abs(a.grad_A - b.grad_A).max() <= 1e-8 * scale
    with pytest.raises(ValueError):
        grad_finite_diff(p, data, spec, step=0.0)


@pytest.mark.parametrize("kind", ["square", "logistic"])
def test_gradcheck_passes_and_detects_fault(kind):
    p, data, spec = instance(8, 5, 1, kind)
    assert gradcheck(p, data, spec).passed
    assert not gradcheck(p, data, spec, inject_fault=True).passed


def test_gradcheck_near_contraction_boundary():
    for seed in range(3):
        p, data, spec = instance(seed, 10, 1, "square", gamma=0.99)
        assert gradcheck(p, data, spec).passed


def test_directional_derivative_second_order():
    p, data, spec = instance(9, 4, 2, "square")
    rng = rng_for(99)
    dA = rng.standard_normal(p.A.shape)
    dB = rng.standard_normal(p.B.shape)
    norm = np.sqrt(np.sum(dA**2) + np.sum(dB**2))
    dA, dB = dA / norm, dB / norm
    g = grad_closed_form(p, data, spec)
    exact = np.sum(g.grad_A * dA) + np.sum(g.grad_B * dB)
    errs = []
    for h in (1e-2, 5e-3):
        lp = objective(ModelParams(p.A + h * dA, p.B + h * dB, p.gamma), data, spec)
        lm = objective(ModelParams(p.A - h * dA, p.B - h * dB, p.gamma), data, spec)
        errs.append(abs((lp - lm) / (2 * h) - exact))
    assert 0.2 <= errs[1] / errs[0] <= 0.3


def test_column_shift_invariance():
    p, data, spec = instance(10, 5, 2, "square")
    shift = rng_for(3).standard_normal(5)
    q = ModelParams(p.A + shift[None, :], p.B, p.gamma)
    assert objective(q, data, spec) == pytest.approx(objective(p, data, spec), rel=1e-13)
    a, b = grad_closed_form(p, data, spec), grad_closed_form(q, data, spec)
    np.testing.assert_allclose(b.grad_B, a.grad_B, rtol=1e-11, atol=1e-11)
    np.testing.assert_allclose(a.grad_A.sum(axis=0), 0.0, atol=1e-9 * np.abs(a.grad_A).max())


def test_loss_and_grad_consistent():
    p, data, spec = instance(11, 4, 1, "logistic")
    loss, g = loss_and_grad(p, data, spec)
    assert loss == pytest.approx(objective(p, data, spec), rel=1e-14)
    np.testing.assert_array_equal(g.grad_A, grad_closed_form(p, data, spec).grad_A)
