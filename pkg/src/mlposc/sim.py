"""Euler-Maruyama sampling of the extended system and Monte-Carlo statistics.

Every path draws its Brownian increments from its own counter-based stream
``Philox(SeedSequence([seed, path_index]))``, so a path does not depend on
how many other paths are simulated or how they are chunked.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from ._validation import ProblemError, time_lattice
from .lqg import LinearPolicy
from .pde import FullStatePolicyGrid, PolicyGridField

log = logging.getLogger(__name__)


@dataclass
class PathEnsemble:
    """Sample paths recorded at ``times``.

    ``x``, ``z`` and ``u`` have shape ``(n_paths, n_rec, dim)``;
    ``cum_cost`` is the running cost accumulated up to each recorded time,
    with the terminal cost added at ``T``.  ``clamped`` counts policy
    evaluations whose memory (or state) fell outside a tabulated policy
    grid and was clamped to its boundary.
    """

    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    cum_cost: np.ndarray
    seed: int
    dt: float
    clamped: int = 0
    label: str = ""

    @property
    def n_paths(self):
        return self.x.shape[0]

    @property
    def total_cost(self):
        return self.cum_cost[:, -1]


class MCEstimate(NamedTuple):
    mean: float
    se: float
    n: int
    degenerate: bool


def _interp_z(field, t, z):
    """Memory field at the nearest tabulated time, linear in ``z``; returns (u, n_clamped)."""
    times = field.times
    if len(times) > 1:
        k = int(round((t - times[0]) / (times[1] - times[0])))
        k = min(max(k, 0), len(times) - 1)
    else:
        k = 0
    grid_z = field.z
    zc = np.clip(z, grid_z[0], grid_z[-1])
    n_clamped = int(np.count_nonzero(zc != z))
    vals = field.values[k]
    u = np.stack([np.interp(zc, grid_z, vals[:, a]) for a in range(vals.shape[1])], axis=-1)
    return u, n_clamped


def _interp_xz(field, t, x, z):
    """Full-state field: nearest time slice, bilinear in ``(x, z)`` with clamping."""
    times = field.times
    k = int(np.argmin(np.abs(times - t)))
    gx, gz = field.x, field.z
    xc = np.clip(x, gx[0], gx[-1])
    zc = np.clip(z, gz[0], gz[-1])
    n_clamped = int(np.count_nonzero((xc != x) | (zc != z)))
    hx, hz = gx[1] - gx[0], gz[1] - gz[0]
    fx = (xc - gx[0]) / hx
    fz = (zc - gz[0]) / hz
    i = np.minimum(fx.astype(int), len(gx) - 2)
    j = np.minimum(fz.astype(int), len(gz) - 2)
    a = (fx - i)[:, None]
    b = (fz - j)[:, None]
    V = field.values[k]
    u = (1 - a) * (1 - b) * V[i, j] + a * (1 - b) * V[i + 1, j] + (1 - a) * b * V[i, j + 1] + a * b * V[i + 1, j + 1]
    return u, n_clamped


def evaluate_policy(policy, t, S, d_x):
    """Control for states ``S`` of shape ``(n, d_s)``; returns ``(u, n_clamped)``."""
    if isinstance(policy, LinearPolicy):
        return policy(t, S), 0
    if isinstance(policy, PolicyGridField):
        if S.shape[1] - d_x != 1:
            raise ProblemError("tabulated memory policies need a scalar memory")
        return _interp_z(policy, t, S[:, d_x])
    if isinstance(policy, FullStatePolicyGrid):
        if S.shape[1] != 2:
            raise ProblemError("tabulated full-state policies need d_s = 2")
        return _interp_xz(policy, t, S[:, 0], S[:, 1])
    if callable(policy):
        return np.asarray(policy(t, S), dtype=float), 0
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def _path_noise(seed, index, n_fine, d_w):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))
    return rng.standard_normal((n_fine, d_w))


def simulate_paths(
    problem,
    policy,
    n_paths,
    dt,
    seed,
    noise_dt=None,
    record_every=None,
    chunk=512,
    label="",
):
    """Simulate ``n_paths`` Euler-Maruyama paths of the extended system.

    Brownian increments are drawn at resolution ``noise_dt`` (default
    ``dt``) and summed to the simulation step, so runs with different ``dt``
    but the same ``noise_dt`` and seed share their Brownian paths.  Costs
    use the left-endpoint rule; the terminal cost is added at ``T``.
    """
    if n_paths < 1:
        raise ProblemError("n_paths must be at least 1")
    times = time_lattice(problem.T, dt)
    n = len(times) - 1
    noise_dt = dt if noise_dt is None else noise_dt
    ratio = dt / noise_dt
    if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-9:
        raise ProblemError(f"dt={dt} must be an integer multiple of noise_dt={noise_dt}")
    ratio = int(round(ratio))
    stride = record_every or max(1, n // 1000)
    rec = list(range(0, n + 1, stride))
    if rec[-1] != n:
        rec.append(n)
    rec_index = {k: r for r, k in enumerate(rec)}
    d_x, d_s, d_w, d_u = problem.d_x, problem.d_s, problem.d_w, problem.d_u
    X = np.empty((n_paths, len(rec), d_x))
    Z = np.empty((n_paths, len(rec), d_s - d_x))
    U = np.empty((n_paths, len(rec), d_u))
    C = np.empty((n_paths, len(rec)))
    L0 = np.linalg.cholesky(problem.cov0 + 1e-300 * np.eye(d_s)) if np.all(np.linalg.eigvalsh(problem.cov0) > 0) else None
    clamped = 0
    sqdt = np.sqrt(noise_dt)
    for start in range(0, n_paths, chunk):
        idx = range(start, min(start + chunk, n_paths))
        m = len(idx)
        noise = np.stack([_path_noise(seed, i, n * ratio + 1, d_w + d_s) for i in idx])
        # the first draw of each stream fixes the initial state
        init = noise[:, 0, :d_s]
        dW = noise[:, 1:, :d_w].reshape(m, n, ratio, d_w).sum(axis=2) * sqdt
        if L0 is not None:
            S = problem.mean0 + init @ L0.T
        else:
            w, V = np.linalg.eigh(problem.cov0)
            S = problem.mean0 + init @ (V * np.sqrt(np.maximum(w, 0.0))).T
        cost = np.zeros(m)
        for k in range(n + 1):
            t = times[k]
            u, nc = evaluate_policy(policy, t, S, d_x)
            clamped += nc
            if k in rec_index:
                r = rec_index[k]
                X[start : start + m, r] = S[:, :d_x]
                Z[start : start + m, r] = S[:, d_x:]
                U[start : start + m, r] = u
                C[start : start + m, r] = cost + (problem.terminal(S) if k == n else 0.0)
            if k == n:
                break
            R = problem.R_at(t)
            cost = cost + (problem.running_state_cost(t, S) + np.einsum("na,ab,nb->n", u, R, u)) * dt
            drift = problem.uncontrolled_drift(t, S) + u @ problem.B_at(t).T
            S = S + drift * dt + dW[:, k] @ problem.sigma_at(t).T
    if clamped:
        log.info("%s: %d policy evaluations clamped to the grid boundary", label or "simulation", clamped)
    return PathEnsemble(times[rec], X, Z, U, C, int(seed), float(dt), clamped, label)


def mc_objective(ensemble):
    """Sample mean and standard error of the total cost.

    A single path gives ``se = 0`` with ``degenerate = True``.
    """
    J = ensemble.total_cost
    n = len(J)
    if n == 0:
        raise ProblemError("empty ensemble")
    if n == 1:
        return MCEstimate(float(J[0]), 0.0, 1, True)
    return MCEstimate(float(J.mean()), float(J.std(ddof=1) / np.sqrt(n)), n, False)


class ObstacleStats(NamedTuple):
    hit_fraction: float
    mean_dwell: float


def obstacle_stats(ensemble, region):
    """Fraction of paths ever inside the region and mean time spent inside.

    ``region`` provides ``t_start``, ``t_end``, ``lo`` and ``hi``; a path is
    inside when ``t_start <= t <= t_end`` and ``lo <= |x_i| <= hi`` for
    every state coordinate.  A window of zero length is never hit.
    """
    if region.t_end <= region.t_start:
        return ObstacleStats(0.0, 0.0)
    t = ensemble.times
    active = (t >= region.t_start) & (t <= region.t_end)
    ax = np.abs(ensemble.x)
    band = np.all((ax >= region.lo) & (ax <= region.hi), axis=-1)
    inside = band & active[None, :]
    hit = inside.any(axis=1)
    widths = np.diff(t, append=t[-1])
    dwell = (inside * widths[None, :]).sum(axis=1)
    return ObstacleStats(float(hit.mean()), float(dwell.mean()))


def ensemble_moments(ensemble):
    """Per-time sample mean and covariance of the extended state."""
    S = np.concatenate([ensemble.x, ensemble.z], axis=-1)
    mean = S.mean(axis=0)
    C = S - mean
    cov = np.einsum("pka,pkb->kab", C, C) / max(ensemble.n_paths - 1, 1)
    return mean, cov
