"""The DELM flow as a trust-region Newton step on the shallow objective (``m_y = 1``).

With ``Z = B U^{-1}``, ``S = I + gamma^2 diag(||J_k Z^T||^2)`` and
``F = sum_i c_i z*_i z*_i^T`` the metric ``G(delta) = U (S^{-1} - delta F) U^T``
is positive definite for small ``delta``. For every such ``delta`` the scaled
flow direction ``v = delta dZ/dt`` minimises the quadratic model of ``L0``
around ``Z`` on the ball ``||v||_G <= delta ||dZ/dt||_G``, with multiplier
``mu = 1 / (2 delta)``. :func:`certify_theorem2` checks this numerically.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .dynamics import d_matrix
from .equilibrium import ModelParams, column_softmax, softmax_jacobians
from .exceptions import InvalidInputError, PreconditionError, UnsupportedConfigurationError
from .losses import Dataset, LossSpec, l0_gradient, l0_hessian, l0_value

__all__ = [
    "TrustRegionCertificate",
    "BiasDecomposition",
    "s_matrix",
    "f_matrix",
    "g_matrix",
    "delta_bar_search",
    "certify_theorem2",
    "error_vector",
    "implicit_bias_decompose",
    "implicit_bias_sweep",
    "perron_defects",
    "perron_vector",
    "certificates_to_json",
    "DELTA_CAP",
    "KKT_TOL",
    "CONSTRAINT_TOL",
    "QUAD_GAP_TOL",
]

#: Returned by :func:`delta_bar_search` when ``F = 0`` and every delta is admissible.
DELTA_CAP = 1e6
KKT_TOL = 1e-8
CONSTRAINT_TOL = 1e-10
QUAD_GAP_TOL = -1e-9


@dataclass(frozen=True)
class TrustRegionCertificate:
    """Numerical evidence that ``v = delta dZ/dt`` solves the trust-region subproblem.

    ``kkt_residual`` and ``constraint_gap`` are absolute; compare them with
    ``kkt_scale`` and ``constraint_scale``.
    """

    delta_bar: float
    delta_used: float
    kkt_residual: float
    constraint_gap: float
    g_lambda_min: float
    quad_model_gap: float
    kkt_scale: float = 1.0
    constraint_scale: float = 1.0
    n_probes: int = 0

    @property
    def passed(self) -> bool:
        return (
            self.g_lambda_min > 0
            and self.kkt_residual <= KKT_TOL * self.kkt_scale
            and self.constraint_gap <= CONSTRAINT_TOL * self.constraint_scale
            and self.quad_model_gap >= QUAD_GAP_TOL
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass(frozen=True)
class BiasDecomposition:
    aligned_component: np.ndarray
    residual_component: np.ndarray
    aligned_norm: float
    residual_norm: float
    V: np.ndarray
    r: np.ndarray


def _require_scalar_output(params: ModelParams) -> None:
    if params.m_y != 1:
        raise UnsupportedConfigurationError(
            f"the trust-region view needs m_y = 1, got m_y = {params.m_y}"
        )


def _resolvent_parts(params: ModelParams):
    m = params.m
    sigma = column_softmax(params.A)
    U = np.eye(m) - params.gamma * sigma
    U_inv = np.linalg.inv(U)
    return sigma, U, U_inv


def s_matrix(params: ModelParams) -> np.ndarray:
    """``S = I + gamma^2 diag(||J_k^T (B U^{-1})^T||^2)``."""
    _require_scalar_output(params)
    sigma, _, U_inv = _resolvent_parts(params)
    z = (params.B @ U_inv)[0]
    J = softmax_jacobians(sigma)
    v = np.einsum("kji,j->ki", J, z)  # row k is J_k^T z
    return np.eye(params.m) + params.gamma**2 * np.diag(np.sum(v**2, axis=1))


def _curvatures(params: ModelParams, data: Dataset, spec: LossSpec, Zstar) -> np.ndarray:
    if spec.kind == "square":
        return np.full(data.n, 2.0)
    p = expit(params.B @ Zstar)[0]
    return p * (1.0 - p) + 2.0 * spec.tau


def f_matrix(params: ModelParams, data: Dataset, spec: LossSpec) -> np.ndarray:
    """``F = sum_i c_i z*(x_i) z*(x_i)^T`` with ``c_i`` the loss curvature at sample ``i``."""
    _require_scalar_output(params)
    if data.m != params.m:
        raise InvalidInputError("data and parameters disagree on m")
    if data.n == 0:
        return np.zeros((params.m, params.m))
    _, U, _ = _resolvent_parts(params)
    Zstar = np.linalg.solve(U, data.Phi)
    c = _curvatures(params, data, spec, Zstar)
    F = (Zstar * c) @ Zstar.T
    return 0.5 * (F + F.T)


def g_matrix(params: ModelParams, data: Dataset, spec: LossSpec, delta: float) -> np.ndarray:
    """``G = U (S^{-1} - delta F) U^T``. Positive definiteness is not enforced."""
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    _, U, _ = _resolvent_parts(params)
    S_inv = np.diag(1.0 / np.diag(s_matrix(params)))
    G = U @ (S_inv - delta * f_matrix(params, data, spec)) @ U.T
    return 0.5 * (G + G.T)


def _g_lambda_min(U, S_inv, F, delta):
    G = U @ (S_inv - delta * F) @ U.T
    return float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])


def delta_bar_search(
    params: ModelParams,
    data: Dataset,
    spec: LossSpec,
    floor: float = 1e-10,
    cap: float = DELTA_CAP,
    rtol: float = 1e-12,
) -> float:
    """Largest ``delta`` with ``lambda_min(G(delta)) >= floor``, by bisection.

    ``lambda_min(G(delta))`` is non-increasing in ``delta`` because ``F`` is
    positive semidefinite. Returns ``cap`` when ``F = 0`` or when ``G(cap)``
    still clears the floor.
    """
    if not floor > 0:
        raise InvalidInputError("floor must be positive")
    F = f_matrix(params, data, spec)
    _, U, _ = _resolvent_parts(params)
    S_inv = np.diag(1.0 / np.diag(s_matrix(params)))
    if not np.any(F):
        return float(cap)
    lam0 = float(np.linalg.eigvalsh(U @ S_inv @ U.T)[0])
    if lam0 < floor:
        raise PreconditionError(
            f"lambda_min(U S^-1 U^T) = {lam0:.3e} is already below the floor {floor:g}"
        )
    # Positive definiteness of S^{-1} - delta F ends at 1 / lambda_max(S^{1/2} F S^{1/2}).
    s_half = np.sqrt(1.0 / np.diag(S_inv))
    edge = 1.0 / float(np.linalg.eigvalsh(s_half[:, None] * F * s_half[None, :])[-1])
    lo, hi = 0.0, min(edge, cap)
    if _g_lambda_min(U, S_inv, F, hi) >= floor:
        return float(hi)
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if _g_lambda_min(U, S_inv, F, mid) >= floor:
            lo = mid
        else:
            hi = mid
    return float(lo)


def _quad_model(value, g, H):
    def q(v):
        v = np.atleast_2d(v)
        return value + v @ g + 0.5 * np.einsum("pi,ij,pj->p", v, H, v)

    return q


def _probes(G: np.ndarray, radius: float, n_probes: int, rng: np.random.Generator):
    """Uniform samples on the ``G``-ellipsoid boundary plus uniform interior samples."""
    m = G.shape[0]
    w, Q = np.linalg.eigh(G)
    G_inv_half = (Q / np.sqrt(w)) @ Q.T
    u = rng.standard_normal((2 * n_probes, m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    scale = np.ones(2 * n_probes)
    scale[n_probes:] = rng.random(n_probes) ** (1.0 / m)
    return (radius * scale[:, None] * u) @ G_inv_half.T


def certify_theorem2(
    params: ModelParams,
    data: Dataset,
    spec: LossSpec,
    delta: float,
    n_probes: int = 500,
    seed: int = 0,
    delta_bar: float | None = None,
) -> TrustRegionCertificate:
    """Check the KKT system, constraint activity and probe optimality at ``delta``.

    ``v = -delta D vec(grad L0(Z))`` must satisfy ``grad q(v) + (1/delta) G v = 0``
    for the quadratic model ``q`` of ``L0`` at ``Z`` (multiplier
    ``mu = 1/(2 delta)``), lie on the boundary ``||v||_G = delta ||dZ/dt||_G``,
    and beat ``n_probes`` boundary and ``n_probes`` interior feasible points.
    """
    _require_scalar_output(params)
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    if delta_bar is None:
        delta_bar = delta_bar_search(params, data, spec)
    if delta > delta_bar * (1.0 + 1e-12):
        raise PreconditionError(f"delta = {delta:.6g} exceeds delta_bar = {delta_bar:.6g}")

    _, U, U_inv = _resolvent_parts(params)
    Z = params.B @ U_inv
    g = l0_gradient(Z, data, spec).ravel()
    H = l0_hessian(Z, data, spec)
    value = l0_value(Z, data, spec)
    z_dot = -d_matrix(params) @ g
    v = delta * z_dot
    G = g_matrix(params, data, spec, delta)
    g_lam = float(np.linalg.eigvalsh(G)[0])

    Gv = G @ v
    Hv = H @ v
    kkt = float(np.linalg.norm(g + Hv + Gv / delta))
    kkt_scale = float(np.linalg.norm(g) + np.linalg.norm(Hv) + np.linalg.norm(Gv) / delta)

    norm_v = math.sqrt(max(float(v @ Gv), 0.0))
    norm_zdot = math.sqrt(max(float(z_dot @ G @ z_dot), 0.0))
    gap = abs(norm_v - delta * norm_zdot)
    gap_scale = max(norm_v, 1e-300)

    q = _quad_model(value, g, H)
    q_v = float(q(v)[0])
    if n_probes > 0 and norm_v > 0 and g_lam > 0:
        rng = np.random.Generator(np.random.Philox(seed))
        probes = _probes(G, norm_v, n_probes, rng)
        quad_gap = float(np.min(q(probes)) - q_v)
    else:
        quad_gap = 0.0
    return TrustRegionCertificate(
        delta_bar=float(delta_bar),
        delta_used=float(delta),
        kkt_residual=kkt,
        constraint_gap=gap,
        g_lambda_min=g_lam,
        quad_model_gap=quad_gap,
        kkt_scale=max(kkt_scale, 1e-300),
        constraint_scale=gap_scale,
        n_probes=int(n_probes),
    )


def error_vector(params: ModelParams, data: Dataset, spec: LossSpec, delta: float) -> np.ndarray:
    """``r = delta S U^{-1} grad L0(Z)^T`` so that ``V^T = -U^{-T} r`` equals ``delta dZ/dt``."""
    _require_scalar_output(params)
    _, _, U_inv = _resolvent_parts(params)
    Z = params.B @ U_inv
    g = l0_gradient(Z, data, spec).ravel()
    return delta * (s_matrix(params) @ (U_inv @ g))


def perron_vector(params: ModelParams) -> np.ndarray:
    """Right Perron vector ``pi`` of ``sigma(A)`` (``sigma pi = pi``), scaled so ``1^T pi = 1``."""
    sigma = column_softmax(params.A)
    m = params.m
    # Replace one row of (sigma - I) pi = 0 by the normalisation 1^T pi = 1.
    M = sigma - np.eye(m)
    M[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    return np.linalg.solve(M, rhs)


def implicit_bias_decompose(
    params: ModelParams,
    data: Dataset | None = None,
    spec: LossSpec | None = None,
    delta: float | None = None,
    r=None,
    projector: str = "orthogonal",
) -> BiasDecomposition:
    """Split ``V^T = -U^{-T} r`` along the Perron direction ``1``.

    ``U^{-T} 1 = 1 / (1 - gamma)``, so the part of ``r`` along ``1`` is
    amplified by exactly ``1 / (1 - gamma)`` and the rest is mapped by
    ``-U^{-T}``. ``projector="orthogonal"`` uses ``P_1 = 11^T / m``;
    ``"perron"`` uses the spectral projector ``1 pi^T`` of ``sigma(A)^T``,
    whose complement is invariant under ``U^{-T}`` so the residual part stays
    bounded as ``gamma -> 1``. Pass ``r`` to decompose a given error vector.
    """
    _require_scalar_output(params)
    m, gamma = params.m, params.gamma
    if projector not in ("orthogonal", "perron"):
        raise InvalidInputError(f"unknown projector {projector!r}")
    if r is None:
        if data is None or spec is None or delta is None:
            raise InvalidInputError("pass either r or (data, spec, delta)")
        r = error_vector(params, data, spec, delta)
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.shape != (m,):
        raise InvalidInputError(f"r must have length {m}")
    _, _, U_inv = _resolvent_parts(params)
    V = -U_inv.T @ r
    weight = r.mean() if projector == "orthogonal" else float(perron_vector(params) @ r)
    P1r = np.full(m, weight)
    aligned = -P1r / (1.0 - gamma)
    residual = -U_inv.T @ (r - P1r)
    return BiasDecomposition(
        aligned_component=aligned,
        residual_component=residual,
        aligned_norm=float(np.linalg.norm(aligned)),
        residual_norm=float(np.linalg.norm(residual)),
        V=V,
        r=r,
    )


def implicit_bias_sweep(
    params: ModelParams,
    gammas,
    data: Dataset | None = None,
    spec: LossSpec | None = None,
    delta: float | None = None,
    r=None,
    projector: str = "orthogonal",
) -> list[tuple[float, BiasDecomposition]]:
    """Decompose one fixed error vector ``r`` under the resolvent of each ``gamma``.

    ``r`` is computed once at ``params.gamma`` unless given, so only the
    propagation ``-U_gamma^{-T}`` changes across the sweep.
    """
    if r is None:
        r = error_vector(params, data, spec, delta)
    out = []
    for gamma in gammas:
        dec = implicit_bias_decompose(params.replace(gamma=gamma), r=r, projector=projector)
        out.append((float(gamma), dec))
    return out


def perron_defects(params: ModelParams) -> tuple[float, float]:
    """``max |1^T sigma(A) - 1^T|`` and ``|rho(gamma sigma(A)) - gamma|``."""
    sigma = column_softmax(params.A)
    col = float(np.max(np.abs(sigma.sum(axis=0) - 1.0)))
    rho = float(np.max(np.abs(np.linalg.eigvals(params.gamma * sigma))))
    return col, abs(rho - params.gamma)


def certificates_to_json(records) -> str:
    """Serialise ``(step, certificate)`` pairs as a JSON list of records."""
    out = []
    for step, cert in records:
        d = cert.to_dict()
        d["step"] = int(step)
        out.append(d)
    return json.dumps(out, indent=2, sort_keys=True)
