"""Closed-form machinery for linear-quadratic-Gaussian problems with memory.

Everything here works on an :class:`~mlposc.model.ExtendedProblem` whose
dynamics are linear and whose costs are quadratic.  Matrix ODEs are
integrated with fixed-step classical RK4 on the lattice ``t_k = k dt``;
symmetric matrices are re-symmetrised after every step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_simpson

from . import _kernels
from ._validation import ProblemError, is_pd, min_eig, time_lattice
from .model import ExtendedProblem, evaluate

log = logging.getLogger(__name__)

SIGMA_ZZ_JITTER = 1e-10


class IntegrationError(RuntimeError):
    """An ODE trajectory became non-finite; ``t`` is the time of failure."""

    def __init__(self, what, t):
        super().__init__(f"{what} blew up at t={t:.6g}")
        self.t = t


def _half_lattice(times):
    dt = times[1] - times[0]
    return np.linspace(times[0], times[-1], 2 * (len(times) - 1) + 1), dt


def _midpoints(traj):
    """Interleave a lattice trajectory with linear midpoints (2N + 1 samples)."""
    traj = np.asarray(traj, dtype=float)
    out = np.empty((2 * traj.shape[0] - 1,) + traj.shape[1:])
    out[0::2] = traj
    out[1::2] = 0.5 * (traj[:-1] + traj[1:])
    return out


@dataclass(frozen=True)
class _Tabulated:
    th: np.ndarray
    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    Rinv_BT: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    D: np.ndarray


def _tabulate(problem, times):
    th, _ = _half_lattice(times)
    if problem.is_time_invariant:
        n = len(th)
        A = np.broadcast_to(problem.A_at(0.0), (n,) + problem.A.shape)
        B = np.broadcast_to(problem.B_at(0.0), (n,) + problem.B.shape)
        R = np.broadcast_to(problem.R_at(0.0), (n,) + problem.R.shape)
        Q = np.broadcast_to(problem.Q_at(0.0), (n,) + problem.Q.shape)
        D = np.broadcast_to(problem.D_at(0.0), (n, problem.d_s, problem.d_s))
    else:
        A = np.array([problem.A_at(t) for t in th])
        B = np.array([problem.B_at(t) for t in th])
        R = np.array([problem.R_at(t) for t in th])
        Q = np.array([problem.Q_at(t) for t in th])
        D = np.array([problem.D_at(t) for t in th])
    Rinv_BT = np.linalg.solve(R, np.swapaxes(B, -1, -2))
    S = B @ Rinv_BT
    return _Tabulated(
        th,
        *(np.ascontiguousarray(x) for x in (A, B, R, Rinv_BT, S, Q, D)),
    )


def _require_lqg(problem):
    if not problem.is_lqg:
        raise ProblemError(f"{problem.name}: the closed-form path needs linear dynamics and quadratic costs")
    for t in (0.0, problem.T):
        if not is_pd(problem.R_at(t)):
            raise ProblemError("R not positive definite")


@dataclass(frozen=True)
class RiccatiBundle:
    """Solution of the coupled moment / Riccati system on a time lattice.

    ``Psi`` is the ordinary Riccati curvature, ``Pi`` the partially
    observable one, ``mu``/``Sigma`` the extended-state moments under the
    optimal policy and ``K`` the inference gain read off ``Sigma``.
    ``alpha``, ``beta`` and ``Upsilon = Psi - Pi`` complete the quadratic
    value ``w(t, s) = s'Pi s + alpha's + beta``.
    """

    problem: ExtendedProblem
    times: np.ndarray
    Psi: np.ndarray
    Pi: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    K: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    Upsilon: np.ndarray
    residuals: tuple = ()
    control_changes: tuple = ()
    objectives: tuple = ()
    converged: bool = True
    iterations: int = 0

    @property
    def dt(self):
        return self.times[1] - self.times[0]

    def value(self, k, S):
        """Quadratic value ``w(t_k, s)`` for states of shape (..., d_s)."""
        Pi = self.Pi[k]
        return np.einsum("...i,ij,...j->...", S, Pi, S) + S @ self.alpha[k] + self.beta[k]

    @property
    def coupling(self):
        """Estimation-coupling term (I-K)' Pi B R^-1 B' Pi (I-K) along the lattice."""
        tab = _tabulate(self.problem, self.times)
        return estimation_coupling(self.Pi, self.K, tab.S[0::2])


@dataclass(frozen=True)
class LinearPolicy:
    """Affine feedback ``u(t, s) = gain(t) s + offset(t)`` on a time lattice.

    Memory-limited policies have zero gain columns on the state block, so
    they read ``z`` only; ``G_hat`` and ``G_mean`` are the gains acting on the
    centred state and on the mean (``u = -G_hat s_hat - G_mean mu``).
    """

    times: np.ndarray
    gain: np.ndarray
    offset: np.ndarray
    d_x: int
    G_hat: Optional[np.ndarray] = None
    G_mean: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    Sigma: Optional[np.ndarray] = None
    kind: str = "linear"

    @property
    def memory_only(self):
        return bool(np.all(self.gain[:, :, : self.d_x] == 0.0))

    @property
    def d_u(self):
        return self.gain.shape[1]

    def _interp(self, arr, t):
        t = float(np.clip(t, self.times[0], self.times[-1]))
        dt = self.times[1] - self.times[0]
        pos = (t - self.times[0]) / dt
        k = min(int(np.floor(pos)), len(self.times) - 2)
        w = pos - k
        if w < 1e-12:
            return arr[k]
        if w > 1 - 1e-12:
            return arr[k + 1]
        return (1 - w) * arr[k] + w * arr[k + 1]

    def gain_at(self, t):
        return self._interp(self.gain, t)

    def offset_at(self, t):
        return self._interp(self.offset, t)

    def __call__(self, t, S):
        """Control for states ``S`` of shape (..., d_s) at time ``t``."""
        S = np.asarray(S, dtype=float)
        return S @ self.gain_at(t).T + self.offset_at(t)

    def at_index(self, k, S):
        return S @ self.gain[k].T + self.offset[k]


@dataclass(frozen=True)
class FilterState:
    """Kalman posterior mean and covariance along a time lattice."""

    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class MomentTrajectory:
    """Closed-loop moments plus accumulated expected running cost."""

    times: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    running_cost: np.ndarray
    blowup_time: Optional[float] = None

    @property
    def trace(self):
        return np.trace(self.Sigma, axis1=1, axis2=2)


def solve_riccati(problem, dt):
    """Riccati curvature ``Psi`` on the lattice, backward from ``Psi(T) = P``."""
    _require_lqg(problem)
    times = time_lattice(problem.T, dt)
    tab = _tabulate(problem, times)
    dummy = np.zeros_like(tab.A)
    Psi, fail = _kernels.riccati_backward(tab.Q, tab.A, tab.S, dummy, np.array(problem.P), dt, False)
    if fail >= 0:
        raise IntegrationError("Riccati equation", times[fail])
    return Psi


def gain_K(Sigma, d_x, jitter=SIGMA_ZZ_JITTER):
    """Inference gain ``[[0, Sxz Szz^-1], [0, I]]`` for one covariance or a stack.

    ``K (s - mu) + mu`` is the conditional mean of ``s`` given its memory part.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[-1]
    Szz = Sigma[..., d_x:, d_x:] + jitter * np.eye(d - d_x)
    cond = np.linalg.cond(Szz)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
        raise np.linalg.LinAlgError("Sigma_zz singular beyond jitter tolerance")
    K = np.zeros_like(Sigma)
    Sxz = Sigma[..., :d_x, d_x:]
    K[..., :d_x, d_x:] = np.swapaxes(np.linalg.solve(Szz, np.swapaxes(Sxz, -1, -2)), -1, -2)
    K[..., d_x:, d_x:] = np.eye(d - d_x)
    return K


def estimation_coupling(Pi, K, S):
    """``(I-K)' Pi S Pi (I-K)`` with ``S = B R^-1 B'``; broadcasts over stacks."""
    I = np.eye(Pi.shape[-1])
    IK = I - K
    return np.swapaxes(IK, -1, -2) @ Pi @ S @ Pi @ IK


def _closed_loop_tables(problem, tab, gain_h, offset_h):
    """Closed-loop drift, forcing and cost-rate coefficients on the half lattice."""
    Acl = tab.A + tab.B @ gain_h
    c = np.einsum("nij,nj->ni", tab.B, offset_h)
    RG = tab.R @ gain_h
    Qb = tab.Q + np.swapaxes(gain_h, -1, -2) @ RG
    qb = np.einsum("nji,nj->ni", RG, offset_h)
    rb = np.einsum("ni,nij,nj->n", offset_h, tab.R, offset_h)
    return (np.ascontiguousarray(x) for x in (Acl, c, tab.D, Qb, qb, rb))


def _check_lattice(policy, times):
    if len(policy.times) != len(times) or not np.allclose(policy.times, times, atol=1e-12):
        return False
    return True


def _policy_half(policy, times):
    if _check_lattice(policy, times):
        return _midpoints(policy.gain), _midpoints(policy.offset)
    th, _ = _half_lattice(times)
    return (
        np.array([policy.gain_at(t) for t in th]),
        np.array([policy.offset_at(t) for t in th]),
    )


def closed_loop_moments(problem, policy, dt, raise_on_blowup=False):
    """Mean and covariance of the extended state under an affine feedback.

    A blow-up (expected for unstable closed loops) truncates the trajectory
    with NaNs from the failure time on and records ``blowup_time``.
    """
    _require_lqg(problem)
    times = time_lattice(problem.T, dt)
    tab = _tabulate(problem, times)
    gain_h, offset_h = _policy_half(policy, times)
    tables = _closed_loop_tables(problem, tab, gain_h, offset_h)
    mu, Sig, cost, fail = _kernels.moments_forward(
        *tables, np.array(problem.mean0), np.array(problem.cov0), dt
    )
    blowup = None
    if fail >= 0:
        blowup = float(times[fail])
        if raise_on_blowup:
            raise IntegrationError("closed-loop moments", blowup)
        log.info("closed-loop moments diverged at t=%.4g", blowup)
        mu[fail:] = np.nan
        Sig[fail:] = np.nan
        cost[fail:] = np.nan
    return MomentTrajectory(times, mu, Sig, cost, blowup)


def lqg_objective(problem, policy, dt):
    """Expected cumulative cost of an affine feedback, evaluated through moments.

    Returns ``inf`` when the closed-loop moments blow up on ``[0, T]``.
    """
    mom = closed_loop_moments(problem, policy, dt)
    if mom.blowup_time is not None:
        return np.inf
    mu, Sig = mom.mu[-1], mom.Sigma[-1]
    terminal = np.trace(problem.P @ Sig) + mu @ problem.P @ mu
    return float(mom.running_cost[-1] + terminal)


def policy_value(problem, policy, dt):
    """Quadratic cost-to-go ``s'W s + a's + b`` of a fixed affine feedback.

    Independent of the moment route: ``E[w(0, s_0)]`` equals
    :func:`lqg_objective` of the same policy.
    """
    _require_lqg(problem)
    times = time_lattice(problem.T, dt)
    tab = _tabulate(problem, times)
    gain_h, offset_h = _policy_half(policy, times)
    tables = _closed_loop_tables(problem, tab, gain_h, offset_h)
    W, a, b, fail = _kernels.policy_value_backward(*tables, np.array(problem.P), dt)
    if fail >= 0:
        raise IntegrationError("policy value", times[fail])
    return W, a, b


def _objective_from_value(problem, W, a, b):
    m, S = problem.mean0, problem.cov0
    return float(np.trace(W[0] @ S) + m @ W[0] @ m + a[0] @ m + b[0])


def _memory_policy(times, Pi, K, Psi, mu, Rinv_BT, d_x, Sigma=None, kind="memory-limited"):
    """``u = -R^-1 B' (Pi K s_hat + Psi mu)`` as an affine feedback on ``s``.

    The state columns of ``K`` are zero for a genuine inference gain, so the
    gain reads ``z`` only; with ``K = I`` this is the full-state feedback.
    """
    G_hat = Rinv_BT @ Pi @ K
    G_mean = Rinv_BT @ Psi
    gain = -G_hat
    offset = np.einsum("nij,nj->ni", G_hat - G_mean, mu)
    return LinearPolicy(times, gain, offset, d_x, G_hat, G_mean, mu, Sigma, kind)


def solve_po_riccati_sweep(
    problem,
    dt,
    tol=1e-10,
    max_iter=500,
    damping=1.0,
    psi=None,
    full_observation=False,
    jitter=SIGMA_ZZ_JITTER,
):
    """Forward-backward sweep for the partially observable Riccati system.

    Starting from the zero policy, alternate (1) the backward partially
    observable Riccati equation with the current inference gain and (2) the
    forward covariance equation under the resulting policy, until the
    sup-norm change of the feedback gain drops below ``tol``.  With
    ``full_observation=True`` the inference gain is fixed to the identity.

    Per-iteration control changes, residuals (sup-norm change of ``Pi`` and
    ``Sigma``) and objective values are recorded on the bundle.
    """
    _require_lqg(problem)
    if not 0 < damping <= 1:
        raise ProblemError(f"damping must lie in (0, 1], got {damping}")
    times = time_lattice(problem.T, dt)
    tab = _tabulate(problem, times)
    d, d_x = problem.d_s, problem.d_x
    P = np.array(problem.P)
    dummy = np.zeros_like(tab.A)
    if psi is None:
        psi, fail = _kernels.riccati_backward(tab.Q, tab.A, tab.S, dummy, P, dt, False)
        if fail >= 0:
            raise IntegrationError("Riccati equation", times[fail])
    Rinv_BT = tab.Rinv_BT[0::2]
    n_t = len(times)

    # mean dynamics only involve Psi
    zero_gain = np.zeros((n_t, problem.d_u, d))
    mean_gain = -Rinv_BT @ psi
    mu, _, _, fail = _kernels.moments_forward(
        *_closed_loop_tables(problem, tab, _midpoints(mean_gain), _midpoints(np.zeros((n_t, problem.d_u)))),
        np.array(problem.mean0),
        np.array(problem.cov0),
        dt,
    )
    if fail >= 0:
        raise IntegrationError("mean equation", times[fail])

    def forward(policy):
        mom = closed_loop_moments(problem, policy, dt)
        if mom.blowup_time is not None:
            raise IntegrationError("covariance equation", mom.blowup_time)
        worst = min(min_eig(S) for S in mom.Sigma[:: max(1, n_t // 200)])
        if worst < -1e-8 * max(1.0, np.abs(mom.Sigma).max()):
            raise ProblemError(f"Sigma lost positive semidefiniteness (min eigenvalue {worst:.3g})")
        J = float(mom.running_cost[-1] + np.trace(P @ mom.Sigma[-1]) + mom.mu[-1] @ P @ mom.mu[-1])
        return mom.Sigma, J

    identity = np.broadcast_to(np.eye(d), (n_t, d, d)).copy()
    zero = LinearPolicy(times, zero_gain, np.zeros((n_t, problem.d_u)), d_x)
    Sigma, J0 = forward(zero)
    K = identity if full_observation else gain_K(Sigma, d_x, jitter)
    Pi = psi.copy()
    gain = zero_gain
    residuals, changes, objectives = [], [], [J0]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Pi_new, fail = _kernels.riccati_backward(tab.Q, tab.A, tab.S, _midpoints(K), P, dt, True)
        if fail >= 0:
            raise IntegrationError("partially observable Riccati equation", times[fail])
        Pi_new = (1 - damping) * Pi + damping * Pi_new if it > 1 else Pi_new
        policy = _memory_policy(times, Pi_new, K, psi, mu, Rinv_BT, d_x)
        if full_observation:
            policy = cosc_policy_from(times, psi, Rinv_BT, d_x)
        Sigma_new, J = forward(policy)
        change = float(np.abs(policy.gain - gain).max())
        resid = float(max(np.abs(Pi_new - Pi).max(), np.abs(Sigma_new - Sigma).max()))
        Pi, Sigma, gain = Pi_new, Sigma_new, policy.gain
        if not full_observation:
            K = gain_K(Sigma, d_x, jitter)
        residuals.append(resid)
        changes.append(change)
        objectives.append(J)
        log.debug("po-riccati sweep %d: control change %.3e residual %.3e J %.6g", it, change, resid, J)
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("po-riccati sweep stopped after %d iterations (last change %.3e)", it, changes[-1])

    Upsilon = psi - Pi
    alpha = 2.0 * np.einsum("nij,nj->ni", Upsilon, mu)
    Qc = estimation_coupling(Pi, K, tab.S[0::2])
    rate = (
        np.einsum("nij,nji->n", Pi, tab.D[0::2])
        - 0.25 * np.einsum("ni,nij,nj->n", alpha, tab.S[0::2], alpha)
        + np.einsum("ni,nij,nj->n", mu, Qc, mu)
    )
    # beta(t) = int_t^T rate
    beta = cumulative_simpson(rate[::-1], dx=dt, initial=0.0)[::-1]
    return RiccatiBundle(
        problem=problem,
        times=times,
        Psi=psi,
        Pi=Pi,
        mu=mu,
        Sigma=Sigma,
        K=K,
        alpha=alpha,
        beta=beta,
        Upsilon=Upsilon,
        residuals=tuple(residuals),
        control_changes=tuple(changes),
        objectives=tuple(objectives),
        converged=converged,
        iterations=it,
    )


def cosc_policy_from(times, psi, Rinv_BT, d_x):
    gain = -Rinv_BT @ psi
    offset = np.zeros(gain.shape[:2])
    return LinearPolicy(times, gain, offset, d_x, -gain, -gain, kind="full-state")


def lqg_policy(bundle):
    """Memory-limited optimal feedback ``u*(t, z) = -R^-1 B' (Pi K s_hat + Psi mu)``."""
    tab = _tabulate(bundle.problem, bundle.times)
    return _memory_policy(
        bundle.times,
        bundle.Pi,
        bundle.K,
        bundle.Psi,
        bundle.mu,
        tab.Rinv_BT[0::2],
        bundle.problem.d_x,
        bundle.Sigma,
        "memory-limited",
    )


def cosc_policy(bundle):
    """Full-state feedback ``u*(t, s) = -R^-1 B' Psi s`` (complete observation)."""
    tab = _tabulate(bundle.problem, bundle.times)
    return cosc_policy_from(bundle.times, bundle.Psi, tab.Rinv_BT[0::2], bundle.problem.d_x)


def psi_substituted_policy(bundle, jitter=SIGMA_ZZ_JITTER):
    """``u(t, z) = -R^-1 B' (Psi K s_hat + Psi mu)`` with ``K`` from its own closed loop.

    The inference gain is read off the covariance that this policy itself
    produces, integrated forward with ``K(Sigma)`` re-evaluated inside every
    RK4 stage.  Past a blow-up the gains are frozen at their last finite
    value.
    """
    problem, times, psi, mu = bundle.problem, bundle.times, bundle.Psi, bundle.mu
    tab = _tabulate(problem, times)
    d_x = problem.d_x
    Sig, fail = _kernels.self_consistent_forward(
        tab.A, tab.S, _midpoints(psi), tab.D, np.array(problem.cov0), d_x, jitter, bundle.dt
    )
    if fail >= 0:
        log.info("psi-substituted closed loop diverged at t=%.4g", times[fail])
        Sig[fail:] = Sig[fail - 1]
    K = gain_K(Sig, d_x, jitter)
    return _memory_policy(times, psi, K, psi, mu, tab.Rinv_BT[0::2], d_x, Sig, "psi-substituted")


def _state_tables(state, obs, times):
    th, _ = _half_lattice(times)
    A = np.array([evaluate(state.A, t) for t in th])
    sig = np.array([evaluate(state.sigma, t) for t in th])
    H = np.array([evaluate(obs.H, t) for t in th])
    g = np.array([evaluate(obs.gamma, t) for t in th])
    GG = g @ np.swapaxes(g, -1, -2)
    for M in GG[:: max(1, len(GG) // 50)]:
        if not is_pd(M):
            raise ProblemError("gamma gamma^T singular")
    return th, A, sig @ np.swapaxes(sig, -1, -2), H, np.linalg.inv(GG), g


def _rk4_forward(rhs, y0, n, dt):
    y = np.empty((n + 1,) + np.shape(y0))
    y[0] = y0
    for k in range(n):
        j = 2 * k
        f1 = rhs(y[k], j)
        f2 = rhs(y[k] + 0.5 * dt * f1, j + 1)
        f3 = rhs(y[k] + 0.5 * dt * f2, j + 1)
        f4 = rhs(y[k] + dt * f3, j + 2)
        nxt = y[k] + dt / 6.0 * (f1 + 2 * f2 + 2 * f3 + f4)
        y[k + 1] = 0.5 * (nxt + np.swapaxes(nxt, -1, -2)) if nxt.ndim == 2 else nxt
        if not np.all(np.isfinite(y[k + 1])):
            raise IntegrationError("forward ODE", (k + 1) * dt)
    return y


def filter_covariance(state, obs, T, dt):
    """Posterior covariance ``dS/dt = sigma sigma' + AS + SA' - SH'(gamma gamma')^-1 HS``."""
    times = time_lattice(T, dt)
    _, A, D, H, GGinv, _ = _state_tables(state, obs, times)
    HtGH = np.swapaxes(H, -1, -2) @ GGinv @ H

    def rhs(S, j):
        return D[j] + A[j] @ S + S @ A[j].T - S @ HtGH[j] @ S

    return times, _rk4_forward(rhs, np.array(state.cov0), len(times) - 1, dt)


def kalman_filter(state, obs, dy, dt, feedback=None):
    """Kalman-Bucy filter driven by observation increments.

    ``dy`` has shape ``(n_steps, d_y)`` or ``(n_paths, n_steps, d_y)``.  The
    mean follows ``dm = (A m + B u) dt + S H'(gamma gamma')^-1 (dy - H m dt)``
    (Euler step per increment) with ``u = -feedback(t) m`` when a feedback
    gain trajectory of shape ``(n_steps + 1, d_u, d_x)`` is given; the
    covariance is integrated with RK4.
    """
    dy = np.asarray(dy, dtype=float)
    n = dy.shape[-2]
    T = n * dt
    times, cov = filter_covariance(state, obs, T, dt)
    _, A, _, H, GGinv, _ = _state_tables(state, obs, times)
    A, H, GGinv = A[0::2], H[0::2], GGinv[0::2]
    B = np.array([evaluate(state.B, t) for t in times])
    m = np.broadcast_to(np.array(state.mean0), dy.shape[:-2] + (state.d_x,)).copy()
    means = np.empty(dy.shape[:-2] + (n + 1, state.d_x))
    means[..., 0, :] = m
    for k in range(n):
        drift = m @ A[k].T
        if feedback is not None:
            drift = drift - m @ (B[k] @ feedback[k]).T
        L = cov[k] @ H[k].T @ GGinv[k]
        m = m + drift * dt + (dy[..., k, :] - m @ H[k].T * dt) @ L.T
        means[..., k + 1, :] = m
    return FilterState(times, means, cov)


@dataclass(frozen=True)
class MemoryGains:
    """Optimal memory dynamics without memory limitation.

    ``v*(t, z) = v_gain(t) z`` and ``kappa*(t) = Sigma_x|z H'(gamma gamma')^-1``;
    ``Sigma_ext`` is the extended covariance the conditional covariance was
    read from.
    """

    times: np.ndarray
    Sigma_x_given_z: np.ndarray
    kappa: np.ndarray
    v_gain: np.ndarray
    u_gain: np.ndarray
    Psi: np.ndarray
    Sigma_ext: np.ndarray = field(repr=False)


def optimal_memory_gains(state, obs, cost, dt, memory=None):
    """Optimal memory drift and observation gain for the unconstrained-memory LQG case.

    The conditional covariance is obtained from the extended-state covariance
    ``Sigma_x|z = Sigma_xx - Sigma_zz`` of the system driven by the optimal
    memory dynamics (memory initialised at the prior mean), not from the
    filter equation itself.
    """
    if memory is not None:
        if memory.eta is not None and np.any(evaluate(memory.eta, 0.0) != 0):
            raise ProblemError("setting mismatch: memory noise must be absent")
        if cost.M is not None and np.any(evaluate(cost.M, 0.0) != 0):
            raise ProblemError("setting mismatch: memory control cost must be absent")
        if memory.d_z != state.d_x:
            raise ProblemError("setting mismatch: memory dimension must equal state dimension")
    if cost.state_cost is not None or cost.terminal_cost is not None:
        raise ProblemError("optimal memory gains need quadratic costs")
    times = time_lattice(cost.T, dt)
    n = len(times) - 1
    th, A, D, H, GGinv, g = _state_tables(state, obs, times)
    d_x = state.d_x
    B = np.array([evaluate(state.B, t) for t in th])
    R = np.array([evaluate(cost.R, t) for t in th])
    Q = np.array([evaluate(cost.Q, t) for t in th])
    S = B @ np.linalg.solve(R, np.swapaxes(B, -1, -2))
    Psi, fail = _kernels.riccati_backward(
        np.ascontiguousarray(Q), np.ascontiguousarray(A), np.ascontiguousarray(S),
        np.zeros_like(A), np.array(cost.P), dt, False,
    )
    if fail >= 0:
        raise IntegrationError("Riccati equation", times[fail])
    Psi_h = _midpoints(Psi)
    HtGinv = np.swapaxes(H, -1, -2) @ GGinv

    def rhs(Sig, j):
        Sxz = Sig[:d_x, :d_x] - Sig[d_x:, d_x:]
        L = Sxz @ HtGinv[j]
        feedback = S[j] @ Psi_h[j]
        At = np.block([[A[j], -feedback], [L @ H[j], A[j] - feedback - L @ H[j]]])
        Lg = L @ g[j]
        Dt = np.zeros((2 * d_x, 2 * d_x))
        Dt[:d_x, :d_x] = D[j]
        Dt[d_x:, d_x:] = Lg @ Lg.T
        return Dt + At @ Sig + Sig @ At.T

    Sig0 = np.zeros((2 * d_x, 2 * d_x))
    Sig0[:d_x, :d_x] = state.cov0
    Sig_ext = _rk4_forward(rhs, Sig0, n, dt)
    Sxz = Sig_ext[:, :d_x, :d_x] - Sig_ext[:, d_x:, d_x:]
    Sxz = 0.5 * (Sxz + np.swapaxes(Sxz, -1, -2))
    kappa = Sxz @ HtGinv[0::2]
    Hk = H[0::2]
    u_gain = -np.linalg.solve(R[0::2], np.swapaxes(B[0::2], -1, -2)) @ Psi
    v_gain = A[0::2] + B[0::2] @ u_gain - kappa @ Hk
    return MemoryGains(times, Sxz, kappa, v_gain, u_gain, Psi, Sig_ext)
