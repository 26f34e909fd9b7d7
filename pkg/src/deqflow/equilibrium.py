"""Column softmax, fixed-point solvers and the resolvent of a DELM.

A deep equilibrium linear model (DELM) maps a feature vector ``phi`` to
``B z*`` where ``z*`` is the fixed point of ``z = gamma * softmax(A) z + phi``.
Because the column softmax is column-stochastic and ``gamma < 1``, the map is
a contraction in the induced 1-norm and ``z* = (I - gamma softmax(A))^{-1} phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .exceptions import InvalidInputError, NonConvergenceError

__all__ = [
    "ModelParams",
    "EquilibriumSolveReport",
    "column_softmax",
    "softmax_column_jacobian",
    "softmax_jacobians",
    "equilibrium_solve",
    "resolvent",
    "forward",
    "DIRECT_SOLVE_MAX_DIM",
]

#: Above this dimension the default solver switches to Neumann iteration.
DIRECT_SOLVE_MAX_DIM = 512

Method = Literal["neumann_iteration", "direct_solve"]


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelParams:
    """Trainable pair ``(A, B)`` and the fixed contraction factor ``gamma``.

    Parameters
    ----------
    A : array of shape (m, m)
        Pre-softmax weights.
    B : array of shape (m_y, m)
        Readout weights.
    gamma : float
        Contraction factor in (0, 1).
    """

    A: np.ndarray
    B: np.ndarray
    gamma: float

    def __post_init__(self):
        A = _frozen(self.A)
        B = _frozen(self.B)
        if B.ndim == 1:
            B = _frozen(B.reshape(1, -1))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidInputError(f"A must be square, got shape {A.shape}")
        if B.ndim != 2 or B.shape[1] != A.shape[0]:
            raise InvalidInputError(
                f"B must have {A.shape[0]} columns, got shape {B.shape}"
            )
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InvalidInputError("A and B must be finite")
        gamma = float(self.gamma)
        if not 0.0 < gamma < 1.0:
            raise InvalidInputError(f"gamma must lie in (0, 1), got {gamma}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "gamma", gamma)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def m_y(self) -> int:
        return self.B.shape[0]

    def replace(self, **changes) -> "ModelParams":
        values = {"A": self.A, "B": self.B, "gamma": self.gamma}
        values.update(changes)
        return ModelParams(**values)


@dataclass(frozen=True)
class EquilibriumSolveReport:
    fixed_point: np.ndarray
    iterations: int
    residual: float
    method: str
    residual_history: tuple = ()


def column_softmax(A) -> np.ndarray:
    """Softmax applied independently to every column of ``A``.

    Each column is shifted by its maximum before exponentiation, so the
    result is exactly invariant to per-column constant shifts and never
    overflows.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise InvalidInputError(f"expected a 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("column_softmax requires finite entries")
    E = np.exp(A - A.max(axis=0, keepdims=True))
    return E / E.sum(axis=0, keepdims=True)


def softmax_column_jacobian(A, k: int) -> np.ndarray:
    """Jacobian of ``A[:, k] -> softmax(A)[:, k]``, i.e. ``diag(s) - s s^T``.

    ``k`` is a zero-based column index.
    """
    A = np.asarray(A, dtype=np.float64)
    m = A.shape[1] if A.ndim == 2 else 0
    if not 0 <= k < m:
        raise InvalidInputError(f"column index {k} out of range for {m} columns")
    s = column_softmax(A)[:, k]
    return np.diag(s) - np.outer(s, s)


def softmax_jacobians(sigma: np.ndarray) -> np.ndarray:
    """All column Jacobians at once from an already computed softmax.

    Returns an array ``J`` of shape (m, m, m) with ``J[k]`` the Jacobian of
    column ``k``.
    """
    m = sigma.shape[0]
    S = sigma.T  # row k is column k of sigma
    J = -S[:, :, None] * S[:, None, :]
    idx = np.arange(m)
    J[:, idx, idx] += S
    return J


def _default_max_iter(tol: float, gamma: float, phi_norm: float) -> int:
    # The first update has 1-norm at most gamma * ||phi||_1.
    scale = max(phi_norm, 1.0)
    return int(math.ceil((math.log(tol) - math.log(scale)) / math.log(gamma))) + 16


def equilibrium_solve(
    params: ModelParams,
    phi_x,
    tol: float = 1e-12,
    max_iter: int | None = None,
    method: Method | None = None,
) -> EquilibriumSolveReport:
    """Solve ``z = gamma softmax(A) z + phi_x`` for a single feature vector.

    The Neumann path iterates the recursion from ``z = phi_x`` and stops when
    the 1-norm of the update drops below ``tol``. ``sigma(A)`` is
    column-stochastic, so the update norm contracts by at least ``gamma``
    per step. The direct path solves ``U z = phi_x``
    with ``U = I - gamma softmax(A)``.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    phi = np.asarray(phi_x, dtype=np.float64)
    if phi.shape != (params.m,):
        raise InvalidInputError(f"phi_x must have shape ({params.m},), got {phi.shape}")
    if method is None:
        method = "direct_solve" if params.m <= DIRECT_SOLVE_MAX_DIM else "neumann_iteration"

    sigma = column_softmax(params.A)
    gamma = params.gamma
    if method == "direct_solve":
        U = np.eye(params.m) - gamma * sigma
        z = np.linalg.solve(U, phi)
        # A posteriori residual of the fixed-point equation.
        residual = float(np.abs(gamma * sigma @ z + phi - z).sum())
        return EquilibriumSolveReport(z, 0, residual, "direct_solve")
    if method != "neumann_iteration":
        raise InvalidInputError(f"unknown method {method!r}")

    if max_iter is None:
        max_iter = _default_max_iter(tol, gamma, float(np.abs(phi).sum()))
    G = gamma * sigma
    # The iterates z_l = G z_{l-1} + phi are the partial sums of sum_l G^l phi.
    # Propagating the update t_l = z_l - z_{l-1} = G t_{l-1} directly keeps its
    # norm free of the cancellation in z_l - z_{l-1}.
    z = phi.copy()
    t = phi
    history = []
    residual = math.inf
    for it in range(1, max_iter + 1):
        t = G @ t
        z = z + t
        residual = float(np.abs(t).sum())
        history.append(residual)
        if residual <= tol:
            return EquilibriumSolveReport(z, it, residual, "neumann_iteration", tuple(history))
    raise NonConvergenceError(
        f"Neumann iteration did not reach tol={tol:g} in {max_iter} steps "
        f"(last residual {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )


def resolvent(params: ModelParams) -> np.ndarray:
    """Return ``U^{-1} = (I - gamma softmax(A))^{-1}``.

    The result is entrywise nonnegative with every column summing to
    ``1 / (1 - gamma)``.
    """
    m = params.m
    U = np.eye(m) - params.gamma * column_softmax(params.A)
    return np.linalg.solve(U, np.eye(m))


def forward(params: ModelParams, Phi) -> np.ndarray:
    """Equilibrium outputs ``B U^{-1} Phi`` for a feature matrix of shape (m, n)."""
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.ndim != 2 or Phi.shape[0] != params.m:
        raise InvalidInputError(
            f"Phi must have shape ({params.m}, n), got {Phi.shape}"
        )
    m = params.m
    U = np.eye(m) - params.gamma * column_softmax(params.A)
    return params.B @ np.linalg.solve(U, Phi)
