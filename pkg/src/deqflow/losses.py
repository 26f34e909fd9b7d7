"""The shallow objective ``L0(W) = sum_i loss(W phi_i, y_i)`` and its certificates.

Every DELM objective factors through ``L0`` via ``L(A, B) = L0(B U^{-1})``, so
the convergence analysis only needs gradients, Hessians and
Polyak-Lojasiewicz constants of ``L0``. Vectorisation follows the
column-major convention: ``vec(W)`` stacks the columns of ``W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit

from .exceptions import (
    InvalidInputError,
    PreconditionError,
    UnsupportedConfigurationError,
)

__all__ = [
    "Dataset",
    "LossSpec",
    "PLCertificate",
    "l0_value",
    "loss_from_outputs",
    "output_gradient",
    "l0_gradient",
    "l0_hessian",
    "pl_constant",
    "logistic_rho",
    "global_min_l0",
    "constrained_min_l0",
    "induced_one_norm",
    "sigma_min",
]


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``Phi`` (m x n) and targets ``Y`` (m_y x n)."""

    Phi: np.ndarray
    Y: np.ndarray
    kind: Literal["regression", "binary_labels"] = "regression"

    def __post_init__(self):
        Phi = np.array(self.Phi, dtype=np.float64, copy=True)
        Y = np.array(self.Y, dtype=np.float64, copy=True)
        if Y.ndim == 1:
            Y = Y.reshape(1, -1)
        if Phi.ndim != 2 or Y.ndim != 2 or Phi.shape[1] != Y.shape[1]:
            raise InvalidInputError(
                f"Phi (m x n) and Y (m_y x n) disagree: {Phi.shape} vs {Y.shape}"
            )
        if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(Y))):
            raise InvalidInputError("dataset entries must be finite")
        if self.kind not in ("regression", "binary_labels"):
            raise InvalidInputError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "binary_labels":
            if Y.shape[0] != 1:
                raise InvalidInputError("binary_labels requires m_y = 1")
            if not np.all((Y == 0) | (Y == 1)):
                raise InvalidInputError("binary_labels requires targets in {0, 1}")
        Phi.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.Phi.shape[0]

    @property
    def n(self) -> int:
        return self.Phi.shape[1]

    @property
    def m_y(self) -> int:
        return self.Y.shape[0]


@dataclass(frozen=True)
class LossSpec:
    """Loss selection. ``tau`` is the logistic L2 penalty on the logit."""

    kind: Literal["square", "logistic"] = "square"
    tau: float = 0.0

    def __post_init__(self):
        if self.kind not in ("square", "logistic"):
            raise InvalidInputError(f"unknown loss kind {self.kind!r}")
        if self.tau < 0:
            raise InvalidInputError("tau must be nonnegative")
        if self.kind == "square" and self.tau != 0:
            raise InvalidInputError("tau must be 0 for the square loss")
        object.__setattr__(self, "tau", float(self.tau))


@dataclass(frozen=True)
class PLCertificate:
    kappa: float
    radius: float
    rho_R: float = 0.0
    sigma_min: float = 0.0


def induced_one_norm(M) -> float:
    """Operator norm induced by the vector 1-norm: the largest column abs-sum."""
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0.0
    return float(np.abs(M).sum(axis=0).max())


def sigma_min(Phi) -> float:
    """The ``min(m, n)``-th largest singular value."""
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.size == 0:
        return 0.0
    return float(np.linalg.svd(Phi, compute_uv=False).min())


def _check(W, data: Dataset, spec: LossSpec) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(1, -1)
    if W.shape != (data.m_y, data.m):
        raise InvalidInputError(
            f"W must have shape ({data.m_y}, {data.m}), got {W.shape}"
        )
    if spec.kind == "logistic":
        if data.m_y != 1:
            raise UnsupportedConfigurationError("logistic loss requires m_y = 1")
        if data.kind != "binary_labels":
            raise UnsupportedConfigurationError(
                "logistic loss requires a binary_labels dataset"
            )
    return W


def loss_from_outputs(outputs, data: Dataset, spec: LossSpec) -> float:
    """Summed loss for model outputs of shape (m_y, n)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if spec.kind == "square":
        return float(np.sum((outputs - data.Y) ** 2))
    q = outputs[0]
    y = data.Y[0]
    # -y log p - (1 - y) log(1 - p) == log(1 + e^q) - y q
    return float(np.sum(np.logaddexp(0.0, q) - y * q + spec.tau * q**2))


def l0_value(W, data: Dataset, spec: LossSpec) -> float:
    W = _check(W, data, spec)
    return loss_from_outputs(W @ data.Phi, data, spec)


def output_gradient(outputs, data: Dataset, spec: LossSpec) -> np.ndarray:
    """Per-sample derivative of the loss in the model output, shape (m_y, n)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if spec.kind == "square":
        return 2.0 * (outputs - data.Y)
    return expit(outputs) - data.Y + 2.0 * spec.tau * outputs


def l0_gradient(W, data: Dataset, spec: LossSpec) -> np.ndarray:
    W = _check(W, data, spec)
    return output_gradient(W @ data.Phi, data, spec) @ data.Phi.T


def l0_hessian(W, data: Dataset, spec: LossSpec) -> np.ndarray:
    """Hessian of ``L0`` with respect to the column-major ``vec(W)``."""
    W = _check(W, data, spec)
    Phi = data.Phi
    if spec.kind == "square":
        return 2.0 * np.kron(Phi @ Phi.T, np.eye(data.m_y))
    p = expit(W @ Phi)[0]
    c = p * (1.0 - p) + 2.0 * spec.tau
    return (Phi * c) @ Phi.T


def logistic_rho(Phi, radius: float) -> float:
    """Infimum of ``p (1 - p)`` over ``||W||_1 < radius`` and all samples.

    For a 1 x m matrix the induced 1-norm is ``max_j |W_j|``, so the largest
    attainable logit magnitude on sample ``i`` is ``radius * ||phi_i||_1``;
    ``p (1 - p)`` decreases in ``|q|``, which gives the closed form.
    """
    if math.isinf(radius):
        return 0.0
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.shape[1] == 0:
        return 0.25
    qmax = radius * np.abs(Phi).sum(axis=0)
    s = expit(qmax)
    return float(np.min(s * (1.0 - s)))


def _rank(Phi: np.ndarray) -> int:
    if Phi.size == 0:
        return 0
    return int(np.linalg.matrix_rank(Phi))


def pl_constant(data: Dataset, spec: LossSpec, radius: float = math.inf) -> PLCertificate:
    """PL constant of ``L0`` on ``{W : ||W||_1 < radius}``.

    Square loss: ``2 sigma_min(Phi)^2`` (needs ``rank(Phi) = min(m, n)``).
    Logistic: ``(2 tau + rho(R)) sigma_min(Phi)^2`` (needs ``rank(Phi) = m``).
    """
    if not radius > 0:
        raise InvalidInputError("radius must be positive")
    Phi = data.Phi
    m, n = Phi.shape
    rank = _rank(Phi)
    smin = sigma_min(Phi)
    if spec.kind == "square":
        if rank != min(m, n) or min(m, n) == 0:
            raise PreconditionError(
                f"square-loss PL constant needs rank(Phi) = min(m, n) = {min(m, n)}, got {rank}"
            )
        return PLCertificate(kappa=2.0 * smin**2, radius=radius, rho_R=0.0, sigma_min=smin)
    if data.m_y != 1:
        raise UnsupportedConfigurationError("logistic loss requires m_y = 1")
    if rank != m:
        raise PreconditionError(f"logistic PL constant needs rank(Phi) = m = {m}, got {rank}")
    rho = logistic_rho(Phi, radius)
    kappa = (2.0 * spec.tau + rho) * smin**2
    if kappa <= 0:
        raise PreconditionError(
            "logistic loss with tau = 0 and R = inf has no positive PL constant; "
            "use a finite radius"
        )
    return PLCertificate(kappa=kappa, radius=radius, rho_R=rho, sigma_min=smin)


def global_min_l0(data: Dataset, spec: LossSpec) -> tuple[float, np.ndarray]:
    """Least-squares minimum ``W* = Y pinv(Phi)`` and its value (square loss only)."""
    if spec.kind != "square":
        raise UnsupportedConfigurationError(
            "global_min_l0 covers the square loss; use constrained_min_l0 for logistic"
        )
    if data.n == 0:
        return 0.0, np.zeros((data.m_y, data.m))
    W = data.Y @ np.linalg.pinv(data.Phi)
    return l0_value(W, data, spec), W


def _project_l1_ball(v: np.ndarray, r: float) -> np.ndarray:
    # Euclidean projection onto {x : ||x||_1 <= r} by sorting (Duchi et al. 2008).
    a = np.abs(v)
    if a.sum() <= r:
        return v
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    idx = np.nonzero(u * k > css - r)[0][-1]
    theta = (css[idx] - r) / (idx + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def _project_columns(W: np.ndarray, r: float) -> np.ndarray:
    return np.column_stack([_project_l1_ball(W[:, j], r) for j in range(W.shape[1])])


def constrained_min_l0(
    data: Dataset,
    spec: LossSpec,
    radius: float = math.inf,
    max_iter: int = 20000,
    tol: float = 1e-13,
) -> tuple[float, np.ndarray]:
    """Estimate ``L*_{0,R} = inf {L0(W) : ||W||_1 < R}``.

    Unconstrained square loss is solved exactly by least squares. The
    unconstrained regularised logistic loss uses a damped Newton iteration.
    Finite radii use accelerated projected gradient over the closed ball of
    radius ``R (1 - 1e-6)`` in the induced 1-norm (one l1 ball per column).
    """
    if math.isinf(radius):
        if spec.kind == "square":
            return global_min_l0(data, spec)
        if spec.tau == 0:
            raise UnsupportedConfigurationError(
                "logistic loss with tau = 0 may not attain its infimum; "
                "pass a finite radius"
            )
        return _damped_newton_logistic(data, spec, max_iter=200, tol=tol)

    r = radius * (1.0 - 1e-6)
    smax = float(np.linalg.svd(data.Phi, compute_uv=False).max()) if data.n else 0.0
    curvature = 2.0 if spec.kind == "square" else 0.25 + 2.0 * spec.tau
    lipschitz = max(curvature * smax**2, 1e-12)
    step = 1.0 / lipschitz

    W = np.zeros((data.m_y, data.m))
    Y_ = W.copy()
    t = 1.0
    f_prev = l0_value(W, data, spec)
    for _ in range(max_iter):
        W_new = _project_columns(Y_ - step * l0_gradient(Y_, data, spec), r)
        f_new = l0_value(W_new, data, spec)
        if f_new > f_prev:
            # Function-value restart keeps FISTA monotone.
            t = 1.0
            Y_ = W
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        Y_ = W_new + ((t - 1.0) / t_new) * (W_new - W)
        done = abs(f_prev - f_new) <= tol * max(1.0, abs(f_new)) and np.allclose(
            W_new, W, rtol=0, atol=1e-12
        )
        W, t, f_prev = W_new, t_new, f_new
        if done:
            break
    return f_prev, W


def _damped_newton_logistic(data, spec, max_iter, tol):
    W = np.zeros((1, data.m))
    f = l0_value(W, data, spec)
    for _ in range(max_iter):
        g = l0_gradient(W, data, spec).ravel()
        H = l0_hessian(W, data, spec)
        d = -np.linalg.solve(H, g)
        decrement = float(-g @ d)
        if decrement / 2.0 <= tol * max(1.0, abs(f)):
            break
        step = 1.0
        # Armijo backtracking.
        while True:
            W_try = W + step * d.reshape(1, -1)
            f_try = l0_value(W_try, data, spec)
            if f_try <= f - 0.25 * step * decrement or step < 1e-12:
                break
            step *= 0.5
        W, f = W_try, f_try
    return f, W
