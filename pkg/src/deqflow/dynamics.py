"""Gradient-flow training of DELMs and the convergence certificates around it.

Under gradient flow on ``(A, B)`` the end-to-end matrix ``Z = B U^{-1}``
evolves as ``d vec(Z)/dt = -D vec(grad L0(Z))`` where ``D`` is symmetric
positive definite with ``lambda_min(D) >= 1 / (m (1 + gamma)^2)``. Combined
with a PL constant ``kappa`` of ``L0`` this gives the envelope

    L(t) - L* <= (L(0) - L*) exp(-2 kappa lambda_T t)

which :func:`flow_integrate` records next to the actual loss.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .equilibrium import ModelParams, column_softmax, softmax_jacobians
from .exceptions import DivergenceError, InvalidInputError, PreconditionError
from .gradients import GradientPair, loss_and_grad
from .losses import (
    Dataset,
    LossSpec,
    constrained_min_l0,
    induced_one_norm,
    l0_gradient,
    l0_value,
    pl_constant,
)

__all__ = [
    "FlowConfig",
    "Trajectory",
    "SpectralCertificate",
    "d_matrix",
    "lambda_floor",
    "spectral_certificate",
    "initialize",
    "flow_integrate",
    "induced_dynamics_residual",
    "time_to_accuracy",
    "baseline_linear_flow",
    "linear_resnet_flow",
    "TRAJECTORY_COLUMNS",
]

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = (
    "step",
    "time",
    "loss",
    "loss_gap",
    "lambda_min",
    "bound_indep",
    "bound_dep",
    "grad_norm_A",
    "grad_norm_B",
    "norm_B_1",
)


@dataclass(frozen=True)
class FlowConfig:
    """Discretisation of the gradient flow.

    ``step_size`` is the Euler step, so the horizon is ``T = steps * step_size``.
    ``radius_R`` is the PL radius; a finite value activates monitoring of
    ``||B_t||_1 < (1 - gamma) R``.
    """

    step_size: float = 1e-3
    steps: int = 1000
    record_every: int = 1
    loss_spec: LossSpec = field(default_factory=LossSpec)
    radius_R: float = math.inf
    integrator: str = "euler"

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be positive")
        if self.steps < 0:
            raise InvalidInputError("steps must be nonnegative")
        if self.record_every < 1:
            raise InvalidInputError("record_every must be at least 1")
        if not self.radius_R > 0:
            raise InvalidInputError("radius_R must be positive")
        if self.integrator not in ("euler", "rk4"):
            raise InvalidInputError(f"unknown integrator {self.integrator!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_R"] = None if math.isinf(self.radius_R) else self.radius_R
        return d


@dataclass
class Trajectory:
    """Time-indexed record of a flow. All sequences share one length."""

    steps: np.ndarray
    times: np.ndarray
    losses: np.ndarray
    lambda_min_seq: np.ndarray
    grad_norm_A: np.ndarray
    grad_norm_B: np.ndarray
    norm_B_1: np.ndarray
    bound_indep: np.ndarray
    bound_dep: np.ndarray
    optimum: float = math.nan
    kappa: float = math.nan
    lambda_floor: float = math.nan
    final_params: ModelParams | None = None
    final_W: np.ndarray | None = None
    radius_violations: list = field(default_factory=list)

    @property
    def loss_gap(self) -> np.ndarray:
        return self.losses - self.optimum

    @property
    def lambda_running_min(self) -> np.ndarray:
        if self.lambda_min_seq.size == 0 or np.all(np.isnan(self.lambda_min_seq)):
            return np.full_like(self.lambda_min_seq, np.nan)
        return np.fmin.accumulate(self.lambda_min_seq)

    def is_monotone(self, atol: float = 1e-10) -> bool:
        return bool(np.all(np.diff(self.losses) <= atol))

    def rows(self):
        gap = self.loss_gap
        for i in range(len(self.times)):
            yield (
                int(self.steps[i]),
                float(self.times[i]),
                float(self.losses[i]),
                float(gap[i]),
                float(self.lambda_min_seq[i]),
                float(self.bound_indep[i]),
                float(self.bound_dep[i]),
                float(self.grad_norm_A[i]),
                float(self.grad_norm_B[i]),
                float(self.norm_B_1[i]),
            )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in self.rows():
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
        return buf.getvalue()

    def to_json(self, config: FlowConfig | None = None) -> str:
        payload = {
            "config": config.to_dict() if config is not None else None,
            "optimum": _json_float(self.optimum),
            "kappa": _json_float(self.kappa),
            "lambda_floor": _json_float(self.lambda_floor),
            "radius_violations": list(self.radius_violations),
            "columns": list(TRAJECTORY_COLUMNS),
            "rows": [[_json_float(v) for v in row] for row in self.rows()],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _json_float(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass(frozen=True)
class SpectralCertificate:
    lambda_min: float
    symmetry_defect: float
    lower_bound_slack: float


def lambda_floor(m: int, gamma: float) -> float:
    """Initialization-independent lower bound ``1 / (m (1 + gamma)^2)``."""
    return 1.0 / (m * (1.0 + gamma) ** 2)


def d_matrix(params: ModelParams) -> np.ndarray:
    """``D = sum_k (U^{-T})[:, k] (U^{-1})[k, :] (x) (I + gamma^2 Z J_k J_k^T Z^T)``.

    Shape ``(m m_y, m m_y)``; acts on column-major ``vec`` of ``m_y x m`` matrices.
    """
    m, m_y, gamma = params.m, params.m_y, params.gamma
    sigma = column_softmax(params.A)
    U_inv = np.linalg.inv(np.eye(m) - gamma * sigma)
    Z = params.B @ U_inv
    J = softmax_jacobians(sigma)
    D = np.zeros((m * m_y, m * m_y))
    eye = np.eye(m_y)
    for k in range(m):
        u = U_inv[k]
        ZJ = Z @ J[k]
        D += np.kron(np.outer(u, u), eye + gamma**2 * (ZJ @ ZJ.T))
    return D


def spectral_certificate(params: ModelParams) -> SpectralCertificate:
    D = d_matrix(params)
    defect = float(np.linalg.norm(D - D.T) / np.linalg.norm(D))
    lam = float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])
    return SpectralCertificate(lam, defect, lam - lambda_floor(params.m, params.gamma))


def initialize(
    scheme: str,
    m: int,
    m_y: int,
    gamma: float,
    seed: int | None = None,
    A=None,
    B=None,
) -> ModelParams:
    """Initial parameters.

    ``scaled_normal`` draws entries from ``N(0, 1) / sqrt(m)``. ``identity`` sets
    ``A = I`` (before the softmax) and ``B`` to the identity padded with zeros.
    ``custom`` takes ``A`` and ``B`` as given.
    """
    if scheme == "scaled_normal":
        rng = np.random.Generator(np.random.Philox(seed))
        A0 = rng.standard_normal((m, m)) / math.sqrt(m)
        B0 = rng.standard_normal((m_y, m)) / math.sqrt(m)
        return ModelParams(A0, B0, gamma)
    if scheme == "identity":
        return ModelParams(np.eye(m), np.eye(m_y, m), gamma)
    if scheme == "custom":
        if A is None or B is None:
            raise InvalidInputError("custom initialization needs A and B")
        return ModelParams(A, B, gamma)
    raise InvalidInputError(f"unknown initialization scheme {scheme!r}")


def _bounds(times, lam_run, optimum, gap0, kappa, floor):
    if not math.isfinite(kappa):
        nan = np.full(len(times), np.nan)
        return nan, nan.copy()
    indep = optimum + gap0 * np.exp(-2.0 * kappa * floor * times)
    dep = optimum + gap0 * np.exp(-2.0 * kappa * lam_run * times)
    return indep, dep


def _optimum_and_kappa(data: Dataset, cfg: FlowConfig):
    spec = cfg.loss_spec
    try:
        optimum, W_star = constrained_min_l0(data, spec, cfg.radius_R)
    except Exception as exc:  # unsupported configuration: bounds are unavailable
        logger.warning("no optimum estimate: %s", exc)
        optimum = math.nan
    try:
        kappa = pl_constant(data, spec, cfg.radius_R).kappa
    except PreconditionError as exc:
        logger.warning("no PL certificate: %s", exc)
        kappa = math.nan
    return optimum, kappa


def _rk4_step(params, data, spec, h):
    def field_(p):
        _, g = loss_and_grad(p, data, spec)
        return g

    def shifted(p, g, c):
        return _advance(p, c, g.grad_A, g.grad_B)

    k1 = field_(params)
    k2 = field_(shifted(params, k1, h / 2))
    k3 = field_(shifted(params, k2, h / 2))
    k4 = field_(shifted(params, k3, h))
    gA = (k1.grad_A + 2 * k2.grad_A + 2 * k3.grad_A + k4.grad_A) / 6
    gB = (k1.grad_B + 2 * k2.grad_B + 2 * k3.grad_B + k4.grad_B) / 6
    return _advance(params, h, gA, gB)


class _NonFinite(Exception):
    pass


def _advance(params, h, gA, gB):
    A = params.A - h * gA
    B = params.B - h * gB
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise _NonFinite
    return ModelParams(A, B, params.gamma)


def flow_integrate(
    init: ModelParams,
    data: Dataset,
    cfg: FlowConfig,
    track_spectrum: bool = True,
) -> Trajectory:
    """Integrate the gradient flow of ``L(A, B)`` and record bound curves.

    ``bound_indep`` uses ``lambda = 1 / (m (1 + gamma)^2)``; ``bound_dep`` uses the
    running minimum of ``lambda_min(D_s)`` over record points up to ``t``.
    Both use ``L*_{0,R}`` as the optimum.
    """
    spec = cfg.loss_spec
    h = cfg.step_size
    gamma = init.gamma
    optimum, kappa = _optimum_and_kappa(data, cfg)
    floor = lambda_floor(init.m, gamma)
    R = cfg.radius_R

    rec = {k: [] for k in ("step", "time", "loss", "lam", "gA", "gB", "nB")}
    violations = []
    params = init

    def record(step, loss, grads):
        rec["step"].append(step)
        rec["time"].append(step * h)
        rec["loss"].append(loss)
        rec["lam"].append(
            spectral_certificate(params).lambda_min if track_spectrum else math.nan
        )
        rec["gA"].append(float(np.linalg.norm(grads.grad_A)))
        rec["gB"].append(float(np.linalg.norm(grads.grad_B)))
        nB = induced_one_norm(params.B)
        rec["nB"].append(nB)
        if math.isfinite(R) and not nB < (1.0 - gamma) * R:
            violations.append(step)
            warnings.warn(
                f"step {step}: ||B||_1 = {nB:.4g} violates the radius condition "
                f"(1 - gamma) R = {(1.0 - gamma) * R:.4g}",
                RuntimeWarning,
                stacklevel=3,
            )

    for step in range(cfg.steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grad(params, data, spec)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        if step % cfg.record_every == 0 or step == cfg.steps:
            record(step, loss, grads)
        if step == cfg.steps:
            break
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                if cfg.integrator == "euler":
                    params = _advance(params, h, grads.grad_A, grads.grad_B)
                else:
                    params = _rk4_step(params, data, spec, h)
        except _NonFinite:
            raise DivergenceError(
                f"non-finite parameters after step {step}; reduce step_size", step=step + 1
            ) from None

    times = np.asarray(rec["time"], dtype=float)
    losses = np.asarray(rec["loss"], dtype=float)
    lam = np.asarray(rec["lam"], dtype=float)
    lam_run = np.fmin.accumulate(lam) if track_spectrum else np.full_like(lam, np.nan)
    gap0 = losses[0] - optimum
    indep, dep = _bounds(times, lam_run, optimum, gap0, kappa, floor)
    return Trajectory(
        steps=np.asarray(rec["step"], dtype=int),
        times=times,
        losses=losses,
        lambda_min_seq=lam,
        grad_norm_A=np.asarray(rec["gA"]),
        grad_norm_B=np.asarray(rec["gB"]),
        norm_B_1=np.asarray(rec["nB"]),
        bound_indep=indep,
        bound_dep=dep,
        optimum=optimum,
        kappa=kappa,
        lambda_floor=floor,
        final_params=params,
        radius_violations=violations,
    )


def _vec(M: np.ndarray) -> np.ndarray:
    return M.reshape(-1, order="F")


def induced_dynamics_residual(
    params: ModelParams, data: Dataset, spec: LossSpec, alpha: float
) -> float:
    """Relative mismatch between one Euler step of ``(A, B)`` and ``-D vec(grad L0(Z))``.

    The mismatch is first order in ``alpha``.
    """
    if not alpha > 0:
        raise InvalidInputError("alpha must be positive")
    m, gamma = params.m, params.gamma
    U_inv = np.linalg.inv(np.eye(m) - gamma * column_softmax(params.A))
    Z = params.B @ U_inv
    _, g = loss_and_grad(params, data, spec)
    stepped = ModelParams(params.A - alpha * g.grad_A, params.B - alpha * g.grad_B, gamma)
    U_inv_next = np.linalg.inv(np.eye(m) - gamma * column_softmax(stepped.A))
    Z_next = stepped.B @ U_inv_next
    lhs = (_vec(Z_next) - _vec(Z)) / alpha
    rhs = -d_matrix(params) @ _vec(l0_gradient(Z, data, spec))
    return float(np.linalg.norm(lhs - rhs) / (np.linalg.norm(rhs) + 1e-12))


def time_to_accuracy(
    kappa: float, m: int, gamma: float, init_gap: float, epsilon: float
) -> float:
    """Horizon ``m (1 + gamma)^2 / (2 kappa) * log(init_gap / epsilon)``."""
    if min(kappa, m, gamma, init_gap, epsilon) <= 0:
        raise InvalidInputError("all inputs must be positive")
    if epsilon >= init_gap:
        return 0.0
    return m * (1.0 + gamma) ** 2 / (2.0 * kappa) * math.log(init_gap / epsilon)


def _linear_trajectory(rec, h, optimum, final_W):
    n = len(rec["loss"])
    nan = np.full(n, np.nan)
    return Trajectory(
        steps=np.asarray(rec["step"], dtype=int),
        times=np.asarray(rec["step"], dtype=float) * h,
        losses=np.asarray(rec["loss"], dtype=float),
        lambda_min_seq=nan.copy(),
        grad_norm_A=nan.copy(),
        grad_norm_B=np.asarray(rec["g"], dtype=float),
        norm_B_1=np.asarray(rec["n1"], dtype=float),
        bound_indep=nan.copy(),
        bound_dep=nan.copy(),
        optimum=optimum,
        final_W=final_W,
    )


def baseline_linear_flow(initW, data: Dataset, spec: LossSpec, cfg: FlowConfig) -> Trajectory:
    """Euler gradient flow directly on ``L0(W)``; the ``lambda`` fields stay NaN."""
    W = np.array(initW, dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(1, -1)
    h = cfg.step_size
    try:
        optimum, _ = constrained_min_l0(data, spec, cfg.radius_R)
    except Exception:
        optimum = math.nan
    rec = {"step": [], "loss": [], "g": [], "n1": []}
    for step in range(cfg.steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss = l0_value(W, data, spec)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        g = l0_gradient(W, data, spec)
        if step % cfg.record_every == 0 or step == cfg.steps:
            rec["step"].append(step)
            rec["loss"].append(loss)
            rec["g"].append(float(np.linalg.norm(g)))
            rec["n1"].append(induced_one_norm(W))
        if step == cfg.steps:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            W = W - h * g
    return _linear_trajectory(rec, h, optimum, W)


def linear_resnet_flow(
    data: Dataset,
    cfg: FlowConfig,
    depth: int = 3,
    experimental: bool = False,
) -> Trajectory:
    """Square-loss gradient flow of ``x -> (I + W_H) ... (I + W_1) x`` from ``W_l = 0``.

    Qualitative comparison only; the architecture is a plain residual stack
    with identity initialization and requires ``m_y = m``.
    """
    if not experimental:
        raise InvalidInputError("linear_resnet_flow is experimental; pass experimental=True")
    if cfg.loss_spec.kind != "square" or data.m_y != data.m:
        raise InvalidInputError("linear ResNet baseline needs the square loss and m_y = m")
    m = data.m
    h = cfg.step_size
    Ws = [np.zeros((m, m)) for _ in range(depth)]
    eye = np.eye(m)
    try:
        optimum, _ = constrained_min_l0(data, cfg.loss_spec, math.inf)
    except Exception:
        optimum = math.nan
    rec = {"step": [], "loss": [], "g": [], "n1": []}
    P = eye
    for step in range(cfg.steps + 1):
        # prefix[l] = (I + W_l) ... (I + W_1); suffix[l] = (I + W_H) ... (I + W_{l+2})
        prefix = [eye]
        for W in Ws:
            prefix.append((eye + W) @ prefix[-1])
        P = prefix[-1]
        R_ = P @ data.Phi - data.Y
        loss = float(np.sum(R_**2))
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        G = 2.0 * R_ @ data.Phi.T
        grads = []
        suffix = eye
        for l in range(depth - 1, -1, -1):
            grads.append(suffix.T @ G @ prefix[l].T)
            suffix = suffix @ (eye + Ws[l])
        grads.reverse()
        if step % cfg.record_every == 0 or step == cfg.steps:
            rec["step"].append(step)
            rec["loss"].append(loss)
            rec["g"].append(float(math.sqrt(sum(np.sum(g_**2) for g_ in grads))))
            rec["n1"].append(induced_one_norm(P))
        if step == cfg.steps:
            break
        Ws = [W - h * g_ for W, g_ in zip(Ws, grads)]
    return _linear_trajectory(rec, h, optimum, P)
