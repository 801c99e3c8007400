"""Local LQG approximation of conventional partially observed control.

The running state cost is replaced by its quadratic expansion about a
nominal trajectory, the resulting Riccati equation is solved, and the
feedback ``u = -R^-1 B' Psi(t) m(t)`` is driven by the Kalman-Bucy filter
mean ``m``.  The filter mean is packaged as a memory ``z = m`` so the
controller can be simulated and evaluated on the original cost with the
same machinery as the memory-limited controllers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from . import _kernels
from ._validation import ProblemError, time_lattice
from .lqg import (
    IntegrationError,
    LinearPolicy,
    _midpoints,
    filter_covariance,
    psi_substituted_policy,
)
from .model import CostSpec, MemoryModel, compose_extended, evaluate


@dataclass(frozen=True)
class BaselineResult:
    """Kalman-memory problem, its linear policy and the pieces they came from.

    ``Q_local`` is the expanded running-state weight on the lattice and
    ``P_local`` the expanded terminal weight.
    """

    problem: object
    policy: LinearPolicy
    times: np.ndarray
    Psi: np.ndarray
    filter_cov: np.ndarray
    Q_local: np.ndarray
    P_local: np.ndarray


def quadratic_weight(fn, d_x, nominal=None, eps=1e-3):
    """Symmetric ``W`` with ``fn(x) ~ const + g'(x - x0) + (x - x0)' W (x - x0)`` near ``x0``.

    Half the central-difference Hessian of a vectorised ``fn`` (inputs of
    shape ``(..., d_x)``).
    """
    x0 = np.zeros(d_x) if nominal is None else np.asarray(nominal, dtype=float)
    E = np.eye(d_x) * eps
    pts = []
    for i in range(d_x):
        for j in range(d_x):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                pts.append(x0 + si * E[i] + sj * E[j])
    vals = np.asarray(fn(np.array(pts)), dtype=float).reshape(d_x, d_x, 4)
    H = (vals[..., 0] - vals[..., 1] - vals[..., 2] + vals[..., 3]) / (4 * eps * eps)
    return 0.25 * (H + H.T)


def _table_fn(times, table):
    """Piecewise-linear interpolant of a tabulated matrix trajectory."""
    flat = table.reshape(len(times), -1)

    def fn(t):
        return np.array([np.interp(t, times, col) for col in flat.T]).reshape(table.shape[1:])

    return fn


def local_lqg_baseline(state, obs, cost, dt=1e-3, nominal=None, eps=1e-3):
    """Quadratic expansion about ``nominal`` (default ``x = 0``) plus Riccati and Kalman.

    Quadratic costs are kept as they are, so on an LQG problem the result is
    the exact separated optimum.  Returns a :class:`BaselineResult` whose
    ``problem`` carries the original (possibly non-quadratic) cost.
    """
    d_x = state.d_x
    times = time_lattice(cost.T, dt)
    th = _midpoints(times)
    if cost.state_cost is None:
        Q_h = np.array([evaluate(cost.Q, t) for t in th])
    else:
        Q_h = np.array([quadratic_weight(lambda x, t=t: cost.state_cost(t, x), d_x, nominal, eps) for t in th])
    if cost.terminal_cost is None:
        P_loc = np.array(cost.P)
    else:
        P_loc = quadratic_weight(cost.terminal_cost, d_x, nominal, eps)
    A = np.array([evaluate(state.A, t) for t in th])
    B = np.array([evaluate(state.B, t) for t in th])
    R = np.array([evaluate(cost.R, t) for t in th])
    Rinv_BT = np.linalg.solve(R, np.swapaxes(B, -1, -2))
    S = B @ Rinv_BT
    Psi, fail = _kernels.riccati_backward(
        np.ascontiguousarray(Q_h), np.ascontiguousarray(A), np.ascontiguousarray(S),
        np.zeros_like(A), np.ascontiguousarray(P_loc), dt, False,
    )
    if fail >= 0:
        raise IntegrationError("Riccati equation", times[fail])
    _, Sig = filter_covariance(state, obs, cost.T, dt)
    H = np.array([evaluate(obs.H, t) for t in times])
    g = np.array([evaluate(obs.gamma, t) for t in times])
    L = Sig @ np.swapaxes(H, -1, -2) @ np.linalg.inv(g @ np.swapaxes(g, -1, -2))
    u_gain = -Rinv_BT[0::2] @ Psi
    A_n, B_n = A[0::2], B[0::2]
    # the filter mean absorbs its own control: dm = (A - B K - L H) m dt + L dy
    C_tab = A_n + B_n @ u_gain - L @ H
    mem = MemoryModel(
        _table_fn(times, L),
        np.array(state.mean0),
        np.zeros((d_x, d_x)),
        C=_table_fn(times, C_tab),
        controlled=False,
    )
    ext_cost = CostSpec(cost.Q, cost.R, cost.P, cost.T, state_cost=cost.state_cost, terminal_cost=cost.terminal_cost)
    problem = compose_extended(state, obs, mem, ext_cost, name="local-lqg")
    d_u = u_gain.shape[1]
    gain = np.zeros((len(times), d_u, 2 * d_x))
    gain[:, :, d_x:] = u_gain
    policy = LinearPolicy(times, gain, np.zeros((len(times), d_u)), d_x, kind="local-lqg")
    return BaselineResult(problem, policy, times, Psi, Sig, Q_h[0::2], P_loc)


def baseline_for(problem, dt=1e-3, **kw):
    """Baseline for a problem built with its state, observation and cost parts in ``meta``."""
    try:
        state, obs, cost = (problem.meta[k] for k in ("state", "obs", "cost"))
    except KeyError as exc:
        raise ProblemError(f"{problem.name}: meta lacks the model part {exc}") from None
    return local_lqg_baseline(state, obs, cost, dt, **kw)


def separated_objective(state, obs, cost, dt=1e-3):
    """Optimal objective of the fully observed-history LQG problem.

    ``E[x0' Psi(0) x0] + int tr(Psi sigma sigma') dt + int tr(Sigma_f Psi S Psi) dt``
    with the filter covariance ``Sigma_f``; trapezoid quadrature.
    """
    if cost.state_cost is not None or cost.terminal_cost is not None:
        raise ProblemError("the separated objective needs quadratic costs")
    res = local_lqg_baseline(state, obs, cost, dt)
    times, Psi, Sig = res.times, res.Psi, res.filter_cov
    B = np.array([evaluate(state.B, t) for t in times])
    R = np.array([evaluate(cost.R, t) for t in times])
    sig = np.array([evaluate(state.sigma, t) for t in times])
    S = B @ np.linalg.solve(R, np.swapaxes(B, -1, -2))
    m0 = np.array(state.mean0)
    J0 = np.trace(Psi[0] @ (np.array(state.cov0) + np.outer(m0, m0)))
    integrand = np.trace(Psi @ sig @ np.swapaxes(sig, -1, -2), axis1=1, axis2=2)
    integrand = integrand + np.trace(Sig @ Psi @ S @ Psi, axis1=1, axis2=2)
    return float(J0 + trapezoid(integrand, times))


def psi_policy(bundle):
    """Memory-limited controller that uses ``Psi`` where the optimum uses ``Pi``."""
    return psi_substituted_policy(bundle)
