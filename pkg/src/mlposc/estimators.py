"""Estimator-style wrappers: ``fit(problem)`` solves, ``predict(X)`` evaluates the control.

``X`` rows are ``(t, z_1, ..., z_dz)`` for memory-limited controllers, so a
fitted controller maps time and memory to the control, as a memory-limited
policy must.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import baseline, lqg
from ._validation import ProblemError
from .pde import GridSpec
from .sim import evaluate_policy
from .sweep import SweepConfig, solve_ml_posc


def _time_memory(X, d_z):
    X = check_array(X, ensure_2d=True, dtype=float)
    if X.shape[1] != 1 + d_z:
        raise ValueError(f"X must have 1 + d_z = {1 + d_z} columns (t, z), got {X.shape[1]}")
    return X[:, 0], X[:, 1:]


def _predict_grouped(policy, d_x, t, z):
    """Evaluate a policy row by row, grouping rows that share a time."""
    S = np.concatenate([np.zeros((len(t), d_x)), z], axis=1)
    out = None
    for tk in np.unique(t):
        rows = t == tk
        u, _ = evaluate_policy(policy, float(tk), S[rows], d_x)
        if out is None:
            out = np.empty((len(t), u.shape[1]))
        out[rows] = u
    return out


class MemoryLimitedLQG(BaseEstimator):
    """Closed-form memory-limited LQG controller from the coupled Riccati sweep."""

    def __init__(self, dt=1e-3, tol=1e-10, max_iter=500, damping=1.0):
        self.dt = dt
        self.tol = tol
        self.max_iter = max_iter
        self.damping = damping

    def fit(self, problem, y=None):
        self.problem_ = problem
        self.bundle_ = lqg.solve_po_riccati_sweep(
            problem, self.dt, tol=self.tol, max_iter=self.max_iter, damping=self.damping
        )
        self.policy_ = lqg.lqg_policy(self.bundle_)
        self.objective_ = lqg.lqg_objective(problem, self.policy_, self.dt)
        self.converged_ = self.bundle_.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        t, z = _time_memory(X, self.problem_.d_z)
        return _predict_grouped(self.policy_, self.problem_.d_x, t, z)


class MemoryLimitedGridController(BaseEstimator):
    """Grid forward-backward sweep controller for a two-dimensional extended state."""

    def __init__(self, lo=-5.0, hi=5.0, n=81, control_bound=60.0, scheme="fitted",
                 max_iter=50, tol=1e-4, damping=1.0, mass_floor=1e-6, control="exact"):
        self.lo = lo
        self.hi = hi
        self.n = n
        self.control_bound = control_bound
        self.scheme = scheme
        self.max_iter = max_iter
        self.tol = tol
        self.damping = damping
        self.mass_floor = mass_floor
        self.control = control

    def fit(self, problem, y=None):
        self.problem_ = problem
        self.grid_ = GridSpec.build(problem, self.lo, self.hi, self.n, self.control_bound, scheme=self.scheme)
        cfg = SweepConfig(
            max_iter=self.max_iter, tol=self.tol, damping=self.damping, mass_floor=self.mass_floor,
            control=self.control,
        )
        self.policy_, self.density_, self.value_, self.report_ = solve_ml_posc(problem, self.grid_, cfg)
        self.objective_ = self.density_.objective
        self.converged_ = self.report_.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        t, z = _time_memory(X, self.problem_.d_z)
        return _predict_grouped(self.policy_, self.problem_.d_x, t, z)


class LocalLQGController(BaseEstimator):
    """Kalman filter plus Riccati feedback on the locally expanded cost.

    ``fit`` takes a problem whose ``meta`` carries its state, observation
    and cost parts; ``predict`` maps ``(t, filter mean)`` rows to controls.
    """

    def __init__(self, dt=1e-3, eps=1e-3):
        self.dt = dt
        self.eps = eps

    def fit(self, problem, y=None):
        self.result_ = baseline.baseline_for(problem, self.dt, eps=self.eps)
        self.problem_ = self.result_.problem
        self.policy_ = self.result_.policy
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        t, z = _time_memory(X, self.problem_.d_z)
        return _predict_grouped(self.policy_, self.problem_.d_x, t, z)


__all__ = ["MemoryLimitedLQG", "MemoryLimitedGridController", "LocalLQGController", "ProblemError"]
