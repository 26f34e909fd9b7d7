import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from deqflow.dynamics import d_matrix
from deqflow.equilibrium import ModelParams, column_softmax, resolvent
from deqflow.exceptions import (
    InvalidInputError,
    PreconditionError,
    UnsupportedConfigurationError,
)
from deqflow.losses import Dataset, l0_gradient, l0_hessian
from deqflow.trust_region import (
    DELTA_CAP,
    TrustRegionCertificate,
    certificates_to_json,
    certify_theorem2,
    delta_bar_search,
    error_vector,
    f_matrix,
    g_matrix,
    implicit_bias_decompose,
    implicit_bias_sweep,
    perron_defects,
    perron_vector,
    s_matrix,
)
from tests.helpers import LOGISTIC, SQUARE, random_binary, random_params, random_regression, rng_for


def instance(seed, m=6, n=20, kind="square"):
    rng = rng_for(seed)
    p = random_params(rng, m, 1)
    data = random_binary(rng, m, n) if kind == "logistic" else random_regression(rng, m, n, 1)
    return p, data, (LOGISTIC if kind == "logistic" else SQUARE)


def delta_bar_oracle(p, data, spec, floor=1e-10):
    # G(delta) >= floor I  <=>  delta <= 1 / lambda_max(U F U^T, U S^-1 U^T - floor I).
    U = np.eye(p.m) - p.gamma * column_softmax(p.A)
    S_inv = np.linalg.inv(s_matrix(p))
    a = U @ f_matrix(p, data, spec) @ U.T
    b = U @ S_inv @ U.T - floor * np.eye(p.m)
    return 1.0 / scipy.linalg.eigh(0.5 * (a + a.T), 0.5 * (b + b.T), eigvals_only=True)[-1]


# ---------------------------------------------------------------- matrices


def test_s_matrix_zero_readout_is_identity():
    p = random_params(rng_for(0), 4).replace(B=np.zeros((1, 4)))
    np.testing.assert_array_equal(s_matrix(p), np.eye(4))


def test_s_matrix_uniform_softmax_closed_form():
    # sigma = 11^T / m: J_k = I/m - 11^T/m^2 for every k, so S = I + gamma^2 ||J z||^2 I.
    m, gamma = 3, 0.6
    B = np.array([[1.0, -2.0, 0.5]])
    p = ModelParams(np.zeros((m, m)), B, gamma)
    z = (B @ resolvent(p))[0]
    J = np.eye(m) / m - np.ones((m, m)) / m**2
    expected = 1 + gamma**2 * np.sum((J @ z) ** 2)
    np.testing.assert_allclose(s_matrix(p), expected * np.eye(m), rtol=1e-14)


def test_f_matrix_square_loss_closed_form():
    p, data, _ = instance(1)
    Zs = resolvent(p) @ data.Phi
    np.testing.assert_allclose(f_matrix(p, data, SQUARE), 2 * Zs @ Zs.T, rtol=1e-12)
    empty = Dataset(np.zeros((6, 0)), np.zeros((1, 0)))
    np.testing.assert_array_equal(f_matrix(p, empty, SQUARE), 0.0)


def test_scalar_output_required():
    p = random_params(rng_for(2), 4, m_y=2)
    data = random_regression(rng_for(2), 4, 5, 2)
    for call in (
        lambda: s_matrix(p),
        lambda: f_matrix(p, data, SQUARE),
        lambda: certify_theorem2(p, data, SQUARE, 1e-3),
        lambda: error_vector(p, data, SQUARE, 1e-3),
    ):
        with pytest.raises(UnsupportedConfigurationError):
            call()


def test_d_matrix_inverse_relation():
    # D^{-1} = U S^{-1} U^T for m_y = 1, so G / delta = D^{-1} / delta - H.
    p, data, spec = instance(3)
    U = np.eye(6) - p.gamma * column_softmax(p.A)
    np.testing.assert_allclose(
        np.linalg.inv(d_matrix(p)), U @ np.linalg.inv(s_matrix(p)) @ U.T, rtol=1e-10, atol=1e-12
    )


@given(st.integers(0, 5000), st.floats(1e-6, 1e-2), st.floats(1.1, 4.0))
def test_g_symmetric_and_monotone_in_delta(seed, delta, factor):
    p, data, spec = instance(seed, m=4, n=8)
    G1 = g_matrix(p, data, spec, delta)
    G2 = g_matrix(p, data, spec, factor * delta)
    np.testing.assert_array_equal(G1, G1.T)
    assert np.linalg.eigvalsh(G1 - G2)[0] >= -1e-9 * np.abs(G1).max()


def test_g_matrix_rejects_nonpositive_delta():
    p, data, spec = instance(4)
    with pytest.raises(InvalidInputError):
        g_matrix(p, data, spec, 0.0)


# ---------------------------------------------------------------- delta bar


@pytest.mark.parametrize("kind", ["square", "logistic"])
def test_delta_bar_matches_generalised_eigen_oracle(kind):
    for seed in range(5):
        p, data, spec = instance(seed, kind=kind)
        got = delta_bar_search(p, data, spec)
        assert got == pytest.approx(delta_bar_oracle(p, data, spec), rel=1e-9)


def test_delta_bar_brackets_positive_definiteness():
    p, data, spec = instance(5)
    db = delta_bar_search(p, data, spec)
    assert np.linalg.eigvalsh(g_matrix(p, data, spec, db))[0] >= 1e-10 * (1 - 1e-6)
    assert np.linalg.eigvalsh(g_matrix(p, data, spec, 1.01 * db))[0] < 1e-10


def test_delta_bar_rank_one_data():
    rng = rng_for(6)
    p = random_params(rng, 5)
    data = random_regression(rng, 5, 1, 1)
    assert delta_bar_search(p, data, SQUARE) == pytest.approx(
        delta_bar_oracle(p, data, SQUARE), rel=1e-9
    )


def test_delta_bar_cap_without_curvature():
    p = random_params(rng_for(7), 3)
    empty = Dataset(np.zeros((3, 0)), np.zeros((1, 0)))
    assert delta_bar_search(p, empty, SQUARE) == DELTA_CAP
    with pytest.raises(InvalidInputError):
        delta_bar_search(p, empty, SQUARE, floor=0.0)


# ---------------------------------------------------------------- certification


@pytest.mark.parametrize("kind", ["square", "logistic"])
def test_certificate_passes_at_half_delta_bar(kind):
    for seed in range(3):
        p, data, spec = instance(seed, kind=kind)
        db = delta_bar_search(p, data, spec)
        cert = certify_theorem2(p, data, spec, db / 2, n_probes=200, seed=seed, delta_bar=db)
        assert cert.passed, cert
        assert cert.delta_used == db / 2


def test_certificate_small_delta_and_scaling():
    # v = delta dZ/dt scales linearly, so the constraint stays active at every delta.
    p, data, spec = instance(8)
    db = delta_bar_search(p, data, spec)
    for frac in (1e-4, 1e-2, 0.25, 0.9):
        assert certify_theorem2(p, data, spec, frac * db, n_probes=100, delta_bar=db).passed


def test_certificate_rejects_delta_beyond_bar():
    p, data, spec = instance(9)
    db = delta_bar_search(p, data, spec)
    with pytest.raises(PreconditionError):
        certify_theorem2(p, data, spec, 2 * db, delta_bar=db)
    with pytest.raises(InvalidInputError):
        certify_theorem2(p, data, spec, -1.0)


def test_certificate_zero_gradient():
    rng = rng_for(10)
    p = random_params(rng, 4).replace(B=np.zeros((1, 4)))
    data = Dataset(rng.standard_normal((4, 6)), np.zeros((1, 6)))
    cert = certify_theorem2(p, data, SQUARE, 1e-3)
    assert cert.kkt_residual == 0.0
    assert cert.constraint_gap == 0.0
    assert cert.passed


def test_certificate_detects_wrong_direction():
    # Plain gradient descent on Z is not the trust-region step in the G metric.
    p, data, spec = instance(11)
    db = delta_bar_search(p, data, spec)
    delta = db / 2
    G = g_matrix(p, data, spec, delta)
    Z = p.B @ resolvent(p)
    g = l0_gradient(Z, data, spec).ravel()
    v = -delta * g
    H = l0_hessian(Z, data, spec)
    residual = np.linalg.norm(g + H @ v + G @ v / delta)
    assert residual > 1e-3 * np.linalg.norm(g)


def test_certificates_json_roundtrip():
    cert = TrustRegionCertificate(1.0, 0.5, 1e-12, 0.0, 0.1, 0.0)
    payload = json.loads(certificates_to_json([(3, cert)]))
    assert payload[0]["step"] == 3
    assert payload[0]["passed"] is True


# ---------------------------------------------------------------- implicit bias


def test_error_vector_reproduces_flow_direction():
    p, data, spec = instance(12)
    delta = 1e-3
    dec = implicit_bias_decompose(p, data, spec, delta)
    # d/dt Z = -D vec(grad L0(Z)), and V^T = delta dZ/dt.
    Z = p.B @ resolvent(p)
    z_dot = -d_matrix(p) @ l0_gradient(Z, data, spec).ravel()
    np.testing.assert_allclose(dec.V, delta * z_dot, rtol=1e-10, atol=1e-14)


@given(st.integers(0, 5000), st.sampled_from([0.3, 0.5, 0.9, 0.99]))
def test_decomposition_reconstructs_V(seed, gamma):
    p = random_params(rng_for(seed), 5, gamma=gamma)
    r = rng_for(seed + 1).standard_normal(5)
    dec = implicit_bias_decompose(p, r=r)
    scale = max(np.abs(dec.V).max(), 1.0)
    assert np.abs(dec.aligned_component + dec.residual_component - dec.V).max() <= 1e-10 * scale


def test_constant_r_is_fully_aligned():
    p = random_params(rng_for(13), 4, gamma=0.9)
    dec = implicit_bias_decompose(p, r=np.full(4, 2.0))
    np.testing.assert_allclose(dec.aligned_component, -2.0 / 0.1, rtol=1e-12)
    assert dec.residual_norm <= 1e-12
    np.testing.assert_allclose(dec.V, dec.aligned_component, rtol=1e-11)


def test_zero_mean_r_has_no_aligned_part():
    p = random_params(rng_for(14), 4, gamma=0.9)
    r = np.array([1.0, -1.0, 2.0, -2.0])
    dec = implicit_bias_decompose(p, r=r)
    assert dec.aligned_norm == 0.0
    np.testing.assert_allclose(dec.residual_component, dec.V, atol=1e-14)


def test_sweep_aligned_scaling_is_exact():
    p, data, spec = instance(15)
    sweep = implicit_bias_sweep(p, [0.5, 0.9, 0.99], data, spec, delta=1e-3)
    scaled = [dec.aligned_norm * (1 - g) for g, dec in sweep]
    np.testing.assert_allclose(scaled, scaled[0], rtol=1e-12)
    norms = [dec.aligned_norm for _, dec in sweep]
    assert norms[0] < norms[1] < norms[2]


GAMMA_NEAR_ONE = 1 - 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_orthogonal_residual_uniformly_bounded_in_gamma(seed):
    """Residual part claimed bounded by a constant independent of gamma.

    A bound ||residual|| <= c for all gamma in (0, 1) forces
    (1 - gamma) ||residual|| <= 1e-6 c at gamma = 1 - 1e-6. Stays red for
    generic sigma(A): the P_1 complement is not invariant under U^{-T}, see
    test_orthogonal_residual_growth_rate for the exact rate.
    """
    p = random_params(rng_for(seed), 6)
    r = rng_for(seed + 100).standard_normal(6)
    dec = implicit_bias_decompose(p.replace(gamma=GAMMA_NEAR_ONE), r=r)
    assert (1 - GAMMA_NEAR_ONE) * dec.residual_norm <= 1e-3 * np.linalg.norm(r)


@pytest.mark.parametrize("seed", range(5))
def test_orthogonal_residual_growth_rate(seed):
    # (I - P_1) r = c 1 + w with w orthogonal to pi, c = pi^T (I - P_1) r, so
    # (1 - gamma) ||residual|| -> |c| sqrt(m).
    p = random_params(rng_for(seed), 6)
    r = rng_for(seed + 100).standard_normal(6)
    c = perron_vector(p) @ (r - r.mean())
    dec = implicit_bias_decompose(p.replace(gamma=GAMMA_NEAR_ONE), r=r)
    assert (1 - GAMMA_NEAR_ONE) * dec.residual_norm == pytest.approx(abs(c) * np.sqrt(6), rel=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_perron_projector_residual_uniformly_bounded(seed):
    p = random_params(rng_for(seed), 6)
    r = rng_for(seed + 100).standard_normal(6)
    norms = [
        implicit_bias_decompose(p.replace(gamma=g), r=r, projector="perron").residual_norm
        for g in (0.5, 0.9, 0.99, 0.999999)
    ]
    assert (1 - GAMMA_NEAR_ONE) * norms[-1] <= 1e-3 * np.linalg.norm(r)
    # The complement of 1 pi^T is invariant under U^{-T}; its resolvent has a finite limit at gamma = 1.
    assert norms[-1] == pytest.approx(norms[-2], rel=0.05)
    dec = implicit_bias_decompose(p.replace(gamma=0.9), r=r, projector="perron")
    np.testing.assert_allclose(dec.aligned_component + dec.residual_component, dec.V, atol=1e-12)


def test_doubly_stochastic_orthogonal_residual_bounded():
    # sigma(0) = 11^T / m is doubly stochastic, so pi is proportional to 1 and both splits agree.
    p = ModelParams(np.zeros((4, 4)), np.zeros((1, 4)), 0.5)
    r = np.array([1.0, -2.0, 0.5, 3.0])
    for g in (0.5, 0.99, GAMMA_NEAR_ONE):
        q = p.replace(gamma=g)
        a = implicit_bias_decompose(q, r=r)
        b = implicit_bias_decompose(q, r=r, projector="perron")
        np.testing.assert_allclose(a.residual_component, -(r - r.mean()), atol=1e-9)
        np.testing.assert_allclose(a.residual_component, b.residual_component, atol=1e-9)


def test_perron_vector_fixed_point():
    p = random_params(rng_for(17), 5)
    pi = perron_vector(p)
    np.testing.assert_allclose(column_softmax(p.A) @ pi, pi, atol=1e-14)
    assert pi.sum() == pytest.approx(1.0) and np.all(pi > 0)


def test_decompose_input_errors():
    p = random_params(rng_for(16), 3)
    with pytest.raises(InvalidInputError):
        implicit_bias_decompose(p)
    with pytest.raises(InvalidInputError):
        implicit_bias_decompose(p, r=np.ones(4))
    with pytest.raises(InvalidInputError):
        implicit_bias_decompose(p, r=np.ones(3), projector="oblique")


def test_perron_defects_small():
    for seed in range(10):
        col, rho = perron_defects(random_params(rng_for(seed), 7, gamma=0.7))
        assert col <= 1e-14
        assert rho <= 1e-12
