"""Gradients of the DELM objective ``L(A, B) = L0(B U^{-1})``.

Two independent derivations are kept side by side:

* :func:`grad_closed_form` rearranges the gradient through ``Z = B U^{-1}``
  and ``Q = grad L0(Z)`` so that column ``k`` of ``dL/dA`` is
  ``gamma J_k^T Z^T Q (U^{-T})[:, k]``.
* :func:`grad_ift` differentiates the fixed-point equation per sample with
  the implicit function theorem and a transposed (adjoint) solve.

:func:`grad_finite_diff` and :func:`gradcheck` validate both against central
differences of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, lu_factor, lu_solve
from scipy.special import expit

from .equilibrium import ModelParams, column_softmax, forward, softmax_jacobians
from .losses import Dataset, LossSpec, loss_from_outputs, output_gradient

__all__ = [
    "GradientPair",
    "GradCheckReport",
    "objective",
    "grad_closed_form",
    "loss_and_grad",
    "grad_ift",
    "grad_finite_diff",
    "gradcheck",
    "relative_error",
    "GRADCHECK_THRESHOLD",
    "GRADCHECK_STEP",
]

GRADCHECK_THRESHOLD = 1e-5
GRADCHECK_STEP = 1e-5


@dataclass(frozen=True)
class GradientPair:
    grad_A: np.ndarray
    grad_B: np.ndarray


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error_A: float
    max_rel_error_B: float
    fd_step: float
    passed: bool
    threshold: float = GRADCHECK_THRESHOLD


def objective(params: ModelParams, data: Dataset, spec: LossSpec) -> float:
    """``L(A, B) = sum_i loss(B U^{-1} phi_i, y_i)``."""
    if data.n == 0:
        return 0.0
    return loss_from_outputs(forward(params, data.Phi), data, spec)


def grad_closed_form(params: ModelParams, data: Dataset, spec: LossSpec) -> GradientPair:
    return loss_and_grad(params, data, spec)[1]


def loss_and_grad(
    params: ModelParams, data: Dataset, spec: LossSpec
) -> tuple[float, GradientPair]:
    """Objective value and closed-form gradient sharing one ``U^{-1}``."""
    m = params.m
    gamma = params.gamma
    sigma = column_softmax(params.A)
    U_inv = np.linalg.inv(np.eye(m) - gamma * sigma)
    Z = params.B @ U_inv
    outputs = Z @ data.Phi
    loss = loss_from_outputs(outputs, data, spec) if data.n else 0.0
    Q = output_gradient(outputs, data, spec) @ data.Phi.T
    J = softmax_jacobians(sigma)
    # Column k of W is Z^T Q (U^{-T})[:, k]; J_k is symmetric so J_k^T = J_k.
    W = (Z.T @ Q) @ U_inv.T
    grad_A = gamma * np.einsum("kij,jk->ik", J, W)
    grad_B = Q @ U_inv.T
    return loss, GradientPair(grad_A, grad_B)


def grad_ift(params: ModelParams, data: Dataset, spec: LossSpec) -> GradientPair:
    """Gradient via ``dz*/dvec(A) = gamma U^{-1} [z*^T (x) I] dvec(sigma)/dvec(A)``.

    For every sample the adjoint ``lam = U^{-T} B^T dloss/dy`` is obtained from
    a transposed LU solve, so no inverse is ever formed.
    """
    m = params.m
    gamma = params.gamma
    sigma = column_softmax(params.A)
    lu = lu_factor(np.eye(m) - gamma * sigma)
    Zstar = lu_solve(lu, data.Phi)  # fixed points, one column per sample
    outputs = params.B @ Zstar
    G = output_gradient(outputs, data, spec)  # (m_y, n)
    # dvec(sigma)/dvec(A) is block diagonal in column-major order.
    dsigma = block_diag(*softmax_jacobians(sigma))
    eye = np.eye(m)
    row = np.zeros(m * m)
    for i in range(data.n):
        lam = lu_solve(lu, params.B.T @ G[:, i], trans=1)
        row += lam @ (gamma * np.kron(Zstar[:, i][None, :], eye))
    grad_vec = row @ dsigma
    grad_A = grad_vec.reshape(m, m, order="F")
    grad_B = G @ Zstar.T
    return GradientPair(grad_A, grad_B)


def grad_finite_diff(
    params: ModelParams,
    data: Dataset,
    spec: LossSpec,
    step: float = GRADCHECK_STEP,
    method: str = "increment",
) -> GradientPair:
    """Central differences of :func:`objective`, one parameter entry at a time.

    ``method="direct"`` evaluates ``(L(p + h e) - L(p - h e)) / 2h`` from two
    full objective values. ``method="increment"`` forms the same quotient from
    the increments ``L(p +- h e) - L(p)``, each computed without cancellation:
    moving one entry of ``A`` changes one column of the softmax, i.e. a
    rank-one change of ``U`` (Sherman-Morrison), and moving one entry of ``B``
    changes the outputs by a rank-one term. This removes the ``eps * L / h``
    roundoff floor of the direct form.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if method == "direct":
        return _fd_direct(params, data, spec, step)
    if method != "increment":
        raise ValueError(f"unknown method {method!r}")
    return _fd_increment(params, data, spec, step)


def _fd_direct(params, data, spec, step):
    A = np.array(params.A)
    B = np.array(params.B)

    def loss(A_, B_):
        return objective(ModelParams(A_, B_, params.gamma), data, spec)

    grad_A = np.zeros_like(A)
    for idx in np.ndindex(*A.shape):
        Ap, Am = A.copy(), A.copy()
        Ap[idx] += step
        Am[idx] -= step
        grad_A[idx] = (loss(Ap, B) - loss(Am, B)) / (2 * step)
    grad_B = np.zeros_like(B)
    for idx in np.ndindex(*B.shape):
        Bp, Bm = B.copy(), B.copy()
        Bp[idx] += step
        Bm[idx] -= step
        grad_B[idx] = (loss(A, Bp) - loss(A, Bm)) / (2 * step)
    return GradientPair(grad_A, grad_B)


def _loss_increment(outputs, delta, data, spec) -> float:
    """``loss(outputs + delta) - loss(outputs)`` without subtracting two totals."""
    if spec.kind == "square":
        r = outputs - data.Y
        return float(np.sum(delta * (2.0 * r + delta)))
    q, d, y = outputs[0], delta[0], data.Y[0]
    # softplus(q + d) - softplus(q) = log1p(p expm1(d)) with p = sigmoid(q)
    p = expit(q)
    dsoft = np.where(
        d >= 0,
        np.log1p(p * np.expm1(d)),
        d + np.log1p((1.0 - p) * np.expm1(-d)),
    )
    return float(np.sum(dsoft - y * d + spec.tau * d * (2.0 * q + d)))


def _softmax_column_shift(s: np.ndarray, j: int, h: float) -> np.ndarray:
    """``softmax(a + h e_j) - softmax(a)`` for ``s = softmax(a)``, in closed form."""
    e = np.expm1(h)
    denom = 1.0 + s[j] * e
    d = -s * (s[j] * e) / denom
    d[j] = s[j] * e * (1.0 - s[j]) / denom
    return d


def _fd_increment(params, data, spec, step):
    m, gamma = params.m, params.gamma
    sigma = column_softmax(params.A)
    U_inv = np.linalg.inv(np.eye(m) - gamma * sigma)
    Zstar = U_inv @ data.Phi  # (m, n)
    outputs = params.B @ Zstar
    BU = params.B @ U_inv

    grad_A = np.zeros((m, m))
    for j, k in np.ndindex(m, m):
        incs = []
        for h in (step, -step):
            d = _softmax_column_shift(sigma[:, k], j, h)
            # U' = U - gamma d e_k^T
            u = U_inv @ d
            coeff = gamma / (1.0 - gamma * u[k])
            delta = coeff * np.outer(BU @ d, Zstar[k])
            incs.append(_loss_increment(outputs, delta, data, spec))
        grad_A[j, k] = (incs[0] - incs[1]) / (2 * step)

    grad_B = np.zeros_like(params.B)
    for i, k in np.ndindex(*params.B.shape):
        incs = []
        for h in (step, -step):
            delta = np.zeros_like(outputs)
            delta[i] = h * Zstar[k]
            incs.append(_loss_increment(outputs, delta, data, spec))
        grad_B[i, k] = (incs[0] - incs[1]) / (2 * step)
    return GradientPair(grad_A, grad_B)


def relative_error(candidate, reference, floor: float = 1e-8) -> float:
    """Largest entrywise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(candidate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(
    params: ModelParams,
    data: Dataset,
    spec: LossSpec,
    fd_step: float = GRADCHECK_STEP,
    threshold: float = GRADCHECK_THRESHOLD,
    inject_fault: bool = False,
) -> GradCheckReport:
    """Compare both analytic gradients with central differences.

    The reported errors are the worst over the two analytic paths.
    ``inject_fault`` adds ``1e-2`` to one entry of the closed-form ``dL/dA``
    so callers can confirm the check actually fails.
    """
    fd = grad_finite_diff(params, data, spec, fd_step)
    closed = grad_closed_form(params, data, spec)
    ift = grad_ift(params, data, spec)
    closed_A = closed.grad_A
    if inject_fault:
        closed_A = closed_A.copy()
        closed_A[0, 0] += 1e-2
    err_A = max(relative_error(closed_A, fd.grad_A), relative_error(ift.grad_A, fd.grad_A))
    err_B = max(
        relative_error(closed.grad_B, fd.grad_B), relative_error(ift.grad_B, fd.grad_B)
    )
    passed = err_A <= threshold and err_B <= threshold
    return GradCheckReport(err_A, err_B, fd_step, passed, threshold)
