"""scikit-learn style estimators around the DELM gradient flow.

Inputs follow the scikit-learn convention ``X`` of shape (n_samples, m) and
are transposed internally to the feature matrix ``Phi`` of shape (m, n).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dynamics import FlowConfig, flow_integrate, initialize
from .equilibrium import column_softmax, forward
from .exceptions import InvalidInputError
from .losses import Dataset, LossSpec

__all__ = ["DELMRegressor", "DELMClassifier", "auto_step_size"]


def auto_step_size(Phi: np.ndarray, gamma: float, curvature: float) -> float:
    """Heuristic Euler step ``(1 - gamma)^2 / (curvature * ||Phi||_2^2)``.

    ``curvature * ||Phi||_2^2`` bounds the Hessian of ``L0`` and the resolvent
    can amplify it by up to ``1 / (1 - gamma)^2``.
    """
    smax = float(np.linalg.norm(Phi, 2)) if Phi.size else 0.0
    return (1.0 - gamma) ** 2 / max(curvature * smax**2, 1e-12)


class _DELMBase(BaseEstimator):
    def _fit_flow(self, X, Y, loss_spec, kind, curvature):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInputError("gamma must lie in (0, 1)")
        Phi = X.T
        data = Dataset(Phi, Y, kind=kind)
        step = self.step_size
        if step is None or step == "auto":
            step = auto_step_size(Phi, self.gamma, curvature)
        init = initialize(self.init, data.m, data.m_y, self.gamma, seed=self.random_state)
        cfg = FlowConfig(
            step_size=float(step),
            steps=int(self.n_steps),
            record_every=max(1, int(self.n_steps) // 100),
            loss_spec=loss_spec,
        )
        traj = flow_integrate(init, data, cfg, track_spectrum=False)
        self.params_ = traj.final_params
        self.step_size_ = float(step)
        self.loss_curve_ = traj.losses
        self.n_features_in_ = X.shape[1]
        U = np.eye(data.m) - self.gamma * column_softmax(self.params_.A)
        self.coef_ = np.linalg.solve(U.T, self.params_.B.T).T
        return self

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return X

    def transform(self, X):
        """Equilibrium points ``z*(x)`` as rows, shape (n_samples, m)."""
        X = self._check_X(X)
        p = self.params_
        U = np.eye(p.m) - p.gamma * column_softmax(p.A)
        return np.linalg.solve(U, X.T).T

    def _outputs(self, X) -> np.ndarray:
        X = self._check_X(X)
        return forward(self.params_, X.T).T


class DELMRegressor(RegressorMixin, _DELMBase):
    """DELM trained by Euler-discretised gradient flow on the summed square loss.

    Parameters
    ----------
    gamma : float, default=0.8
        Contraction factor in (0, 1).
    step_size : float or "auto", default="auto"
        Euler step; ``"auto"`` uses :func:`auto_step_size`.
    n_steps : int, default=2000
        Number of Euler steps.
    init : {"scaled_normal", "identity"}, default="scaled_normal"
    random_state : int or None
    """

    def __init__(self, gamma=0.8, step_size="auto", n_steps=2000, init="scaled_normal",
                 random_state=None):
        self.gamma = gamma
        self.step_size = step_size
        self.n_steps = n_steps
        self.init = init
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True, y_numeric=True)
        self._single_output = y.ndim == 1
        Y = y.reshape(-1, 1).T if y.ndim == 1 else y.T
        return self._fit_flow(X, Y, LossSpec("square"), "regression", 2.0)

    def predict(self, X):
        out = self._outputs(X)
        return out[:, 0] if self._single_output else out


class DELMClassifier(ClassifierMixin, _DELMBase):
    """Binary DELM classifier trained on the (optionally regularised) logistic loss.

    Parameters
    ----------
    gamma : float, default=0.8
    tau : float, default=0.1
        Weight of the ``tau * q^2`` regulariser on each logit ``q``.
    step_size, n_steps, init, random_state
        As in :class:`DELMRegressor`.
    """

    def __init__(self, gamma=0.8, tau=0.1, step_size="auto", n_steps=2000,
                 init="scaled_normal", random_state=None):
        self.gamma = gamma
        self.tau = tau
        self.step_size = step_size
        self.n_steps = n_steps
        self.init = init
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"DELMClassifier is binary; got {len(self.classes_)} classes")
        Y = (y == self.classes_[1]).astype(np.float64).reshape(1, -1)
        spec = LossSpec("logistic", tau=float(self.tau))
        return self._fit_flow(X, Y, spec, "binary_labels", 0.25 + 2.0 * self.tau)

    def decision_function(self, X):
        return self._outputs(X)[:, 0]

    def predict_proba(self, X):
        p1 = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

