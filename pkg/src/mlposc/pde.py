"""Explicit finite-volume / finite-difference solvers on a 2-D ``(x, z)`` lattice.

The density scheme is a vertex-centred finite-volume method: boundary nodes
own half cells (with half-length side faces), so the conserved quantity is
exactly the trapezoidal mass.  The face drift is the mean of the two node
drifts; the face flux is either exponentially fitted (Scharfetter-Gummel,
the default) or first-order upwind drift plus centred diffusion.  Outer
faces carry no flux.

The value scheme is the exact discrete adjoint of the density scheme on
interior nodes (upwinding against the drift), so that the pairing
``sum_k dt <f_k, p_k> + <g, p_N>`` equals ``<w_0, p_0>`` up to boundary
terms.  Boundary values are filled after every step by quadratic extrapolation
from the last interior nodes (a linear extrapolation of the gradient),
which is exact for quadratic values.  A reflecting closure, the exact
adjoint of the no-flux density boundary, is available as an option.

Only diagonal, state-independent diffusion is supported; both axes use
uniform spacing.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from ._validation import ProblemError, check_step
from .lqg import LinearPolicy

log = logging.getLogger(__name__)

MASS_EPS = 1e-12
NEG_TOL = 1e-12  # relative to max(1, peak density)
SCHEMES = ("fitted", "upwind")


class StabilityError(RuntimeError):
    """The explicit time step violates the stability bound of the grid."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform ``(x, z)`` lattice plus time lattice with step ``dt``.

    ``dt_max`` is the positivity bound of the explicit density step for
    drifts whose control part stays within ``control_bound`` (sup-norm).
    """

    lo: tuple
    hi: tuple
    n: tuple
    T: float
    dt: float
    dt_max: float
    control_bound: float
    scheme: str = "fitted"

    @classmethod
    def build(cls, problem, lo, hi, n, control_bound, safety=0.9, dt=None, scheme="fitted"):
        if scheme not in SCHEMES:
            raise ProblemError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if problem.d_s != 2:
            raise ProblemError(f"grid solvers support d_s = 2 only, got {problem.d_s}")
        lo = tuple(float(v) for v in np.broadcast_to(lo, (2,)))
        hi = tuple(float(v) for v in np.broadcast_to(hi, (2,)))
        n = tuple(int(v) for v in np.broadcast_to(n, (2,)))
        if any(b <= a for a, b in zip(lo, hi)) or min(n) < 5:
            raise ProblemError(f"bad grid extent lo={lo} hi={hi} n={n}")
        if not control_bound >= 0:
            raise ProblemError("control_bound must be non-negative")
        h = np.array([(b - a) / (m - 1) for a, b, m in zip(lo, hi, n)])
        D = _diag_diffusion(problem)
        S = _nodes(lo, hi, n)
        bmax = np.zeros(2)
        for t in np.linspace(0.0, problem.T, 11):
            b = problem.uncontrolled_drift(t, S)
            bmax = np.maximum(bmax, np.abs(b).max(axis=(0, 1)))
            bmax = np.maximum(bmax, np.abs(b).max(axis=(0, 1)) + np.abs(problem.B_at(t)).sum(axis=1) * control_bound)
        rate = float(np.sum(2.0 * bmax / h + D / h**2))
        dt_max = safety / rate if rate > 0 else problem.T
        if dt is None:
            dt = problem.T / math.ceil(problem.T / dt_max - 1e-9)
        check_step(dt, problem.T)
        if dt > dt_max * (1 + 1e-12):
            raise StabilityError(f"time step {dt:.3g} exceeds the stability bound {dt_max:.3g}")
        n_steps = round(problem.T / dt)
        if abs(n_steps * dt - problem.T) > 1e-9 * problem.T:
            raise ProblemError(f"T={problem.T} is not an integer multiple of dt={dt}")
        return cls(lo, hi, n, float(problem.T), float(dt), float(dt_max), float(control_bound), scheme)

    @property
    def h(self):
        return np.array([(b - a) / (m - 1) for a, b, m in zip(self.lo, self.hi, self.n)])

    @property
    def x(self):
        return np.linspace(self.lo[0], self.hi[0], self.n[0])

    @property
    def z(self):
        return np.linspace(self.lo[1], self.hi[1], self.n[1])

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def nodes(self):
        return _nodes(self.lo, self.hi, self.n)

    @property
    def weights(self):
        """Trapezoidal quadrature weights (cell volumes) of shape ``n``."""
        wx = np.full(self.n[0], self.h[0])
        wz = np.full(self.n[1], self.h[1])
        wx[[0, -1]] *= 0.5
        wz[[0, -1]] *= 0.5
        return np.outer(wx, wz)

    def interior_mask(self, fraction=0.5):
        """Nodes inside the centred sub-box covering ``fraction`` of each axis."""
        S = self.nodes
        mask = np.ones(self.n, dtype=bool)
        for a in range(2):
            c = 0.5 * (self.lo[a] + self.hi[a])
            half = 0.5 * fraction * (self.hi[a] - self.lo[a])
            mask &= np.abs(S[..., a] - c) <= half + 1e-12
        return mask


def _nodes(lo, hi, n):
    x = np.linspace(lo[0], hi[0], n[0])
    z = np.linspace(lo[1], hi[1], n[1])
    X, Z = np.meshgrid(x, z, indexing="ij")
    return np.stack([X, Z], axis=-1)


def _diag_diffusion(problem, t=0.0):
    D = problem.D_at(t)
    if np.any(np.abs(D - np.diag(np.diag(D))) > 1e-14):
        raise ProblemError("grid solvers need a diagonal diffusion matrix")
    if not problem.is_time_invariant and callable(problem.sigma):
        for s in np.linspace(0.0, problem.T, 5):
            if not np.allclose(problem.D_at(s), D):
                raise ProblemError("grid solvers need a time-invariant diffusion matrix")
    return np.diag(D).copy()


@dataclass(frozen=True)
class PolicyGridField:
    """Memory-feedback control ``u(t_k, z_j)`` tabulated on the grid.

    ``values`` has shape ``(n_t, n_z, d_u)``; ``mask`` flags ``(k, j)`` nodes
    whose memory marginal carried less than ``MASS_EPS`` and therefore hold
    the fallback control.
    """

    times: np.ndarray
    z: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    fallback: float = 0.0

    @classmethod
    def zeros(cls, grid, d_u):
        n_t = grid.n_steps + 1
        return cls(grid.times, grid.z, np.zeros((n_t, grid.n[1], d_u)), np.zeros((n_t, grid.n[1]), dtype=bool))

    @classmethod
    def from_linear(cls, policy, grid):
        """Tabulate a memory-only affine feedback on the grid lattice."""
        if not policy.memory_only:
            raise ProblemError("policy reads the state; only memory feedback can be tabulated over z")
        vals = np.stack([_linear_on_z(policy, t, grid.z) for t in grid.times])
        return cls(grid.times, grid.z, vals, np.zeros(vals.shape[:2], dtype=bool))

    @property
    def d_u(self):
        return self.values.shape[-1]

    def step_values(self, k, t):
        if len(self.times) == 1:
            return self.values[0]
        dt = self.times[1] - self.times[0]
        j = int(round((t - self.times[0]) / dt))
        return self.values[min(max(j, 0), len(self.times) - 1)]


def _linear_on_z(policy, t, z):
    d_x = policy.d_x
    S = np.zeros((len(z), d_x + 1))
    S[:, d_x] = z
    return policy(t, S)


def _controls_at(policy, grid, k, t):
    if isinstance(policy, PolicyGridField):
        return np.ascontiguousarray(policy.step_values(k, t), dtype=float)
    if isinstance(policy, LinearPolicy):
        return np.ascontiguousarray(_linear_on_z(policy, t, grid.z))
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


@dataclass
class DensityGrid:
    """Densities ``p_k`` on the grid, kept at selected step indices.

    ``mass`` and ``min_before_clip`` are recorded at every step; the
    ``expected_cost`` entry ``k`` is ``<f_k, p_k>`` including the control
    cost, so the grid objective is ``dt * sum(expected_cost[:-1]) + terminal``.
    """

    grid: GridSpec
    steps: np.ndarray
    values: np.ndarray
    mass: np.ndarray
    min_before_clip: np.ndarray
    expected_cost: np.ndarray
    terminal_cost: float
    checkpoints: dict = field(default_factory=dict, repr=False)

    def at(self, k):
        idx = np.searchsorted(self.steps, k)
        if idx >= len(self.steps) or self.steps[idx] != k:
            raise KeyError(f"step {k} not retained")
        return self.values[idx]

    @property
    def objective(self):
        return float(self.grid.dt * self.expected_cost[:-1].sum() + self.terminal_cost)

    def marginal_z(self, k):
        return _x_integral(self.at(k), self.grid)

    def moments(self, k):
        """Grid mean and covariance of ``s`` at retained step ``k``."""
        return grid_moments(self.at(k), self.grid)


@dataclass
class ValueGrid:
    """Values ``w_k`` on the grid at selected step indices; ``w_N = g`` exactly."""

    grid: GridSpec
    steps: np.ndarray
    values: np.ndarray

    def at(self, k):
        idx = np.searchsorted(self.steps, k)
        if idx >= len(self.steps) or self.steps[idx] != k:
            raise KeyError(f"step {k} not retained")
        return self.values[idx]


def _x_integral(p, grid):
    """Trapezoidal integral over x for every z node: the memory marginal."""
    wx = np.full(grid.n[0], grid.h[0])
    wx[[0, -1]] *= 0.5
    return wx @ p


def grid_moments(p, grid):
    W = grid.weights * p
    S = grid.nodes
    m = W.sum()
    mean = np.einsum("ij,ija->a", W, S) / m
    C = S - mean
    cov = np.einsum("ij,ija,ijb->ab", W, C, C) / m
    return mean, cov


@njit(cache=True)
def _bernoulli(x):
    if abs(x) < 1e-8:
        return 1.0 - 0.5 * x
    if x > 700.0:
        return 0.0
    return x / np.expm1(x)


@njit(cache=True)
def _face_coefs(b, D, h, fitted):
    """Flux ``F = aL p_left - aR p_right`` across one face, both weights >= 0.

    Plain upwinding: ``aL = b+ + D/2h``, ``aR = b- + D/2h``.  The fitted
    (Scharfetter-Gummel) weights ``D/2h * B(-+Pe)`` with ``Pe = 2bh/D`` and
    ``B(x) = x/(e^x - 1)`` reduce to plain upwinding when drift dominates and
    to centred differences when diffusion dominates.
    """
    if fitted and D > 0.0:
        pe = 2.0 * b * h / D
        c = 0.5 * D / h
        return c * _bernoulli(-pe), c * _bernoulli(pe)
    return max(b, 0.0) + 0.5 * D / h, max(-b, 0.0) + 0.5 * D / h


@njit(cache=True)
def _face_len(i, n, h):
    """Length of a cell face at transverse index ``i``: boundary cells are half cells."""
    return 0.5 * h if i == 0 or i == n - 1 else h


@njit(cache=True)
def _fp_step(p, b0, bu, Dx, Dz, hx, hz, dt, vol, fitted, out):
    nx, nz = p.shape
    acc = np.zeros((nx, nz))
    for i in range(nx - 1):
        for j in range(nz):
            bf = 0.5 * (b0[i, j, 0] + b0[i + 1, j, 0]) + bu[j, 0]
            aL, aR = _face_coefs(bf, Dx, hx, fitted)
            F = (aL * p[i, j] - aR * p[i + 1, j]) * _face_len(j, nz, hz)
            acc[i, j] -= F
            acc[i + 1, j] += F
    for i in range(nx):
        for j in range(nz - 1):
            bf = 0.5 * (b0[i, j, 1] + bu[j, 1] + b0[i, j + 1, 1] + bu[j + 1, 1])
            aL, aR = _face_coefs(bf, Dz, hz, fitted)
            F = (aL * p[i, j] - aR * p[i, j + 1]) * _face_len(i, nx, hx)
            acc[i, j] -= F
            acc[i, j + 1] += F
    for i in range(nx):
        for j in range(nz):
            out[i, j] = p[i, j] + dt * acc[i, j] / vol[i, j]
    return out


@njit(cache=True)
def _value_operator(w, b0, bu, Dx, Dz, hx, hz, vol, fitted, out):
    """Backward generator ``L w``: the exact adjoint of the density step.

    Boundary rows are the adjoint of the no-flux boundary (a reflecting
    closure); callers using the extrapolation closure overwrite them.
    """
    nx, nz = w.shape
    out[:, :] = 0.0
    for i in range(nx - 1):
        for j in range(nz):
            bf = 0.5 * (b0[i, j, 0] + b0[i + 1, j, 0]) + bu[j, 0]
            aL, aR = _face_coefs(bf, Dx, hx, fitted)
            dw = (w[i + 1, j] - w[i, j]) * _face_len(j, nz, hz)
            out[i, j] += aL * dw / vol[i, j]
            out[i + 1, j] -= aR * dw / vol[i + 1, j]
    for i in range(nx):
        for j in range(nz - 1):
            bf = 0.5 * (b0[i, j, 1] + bu[j, 1] + b0[i, j + 1, 1] + bu[j + 1, 1])
            aL, aR = _face_coefs(bf, Dz, hz, fitted)
            dw = (w[i, j + 1] - w[i, j]) * _face_len(i, nx, hx)
            out[i, j] += aL * dw / vol[i, j]
            out[i, j + 1] -= aR * dw / vol[i, j + 1]
    return out


@njit(cache=True)
def _bernoulli_d1(x):
    if abs(x) < 1e-3:
        return -0.5 + x / 6.0 - x ** 3 / 180.0
    if x > 350.0:
        return 0.0
    E = np.expm1(x)
    return (E - x * (E + 1.0)) / (E * E)


@njit(cache=True)
def _bernoulli_d2(x):
    if abs(x) < 1e-2:
        return 1.0 / 6.0 - x * x / 60.0
    if x > 230.0:
        return 0.0
    E = np.expm1(x)
    return (E + 1.0) * (x * (E + 2.0) - 2.0 * E) / (E * E * E)


@njit(cache=True)
def _row_hamiltonian(w, p, b0, j, bc, Dx, hx, hz, fitted, q):
    """Control-dependent part of the discrete Hamiltonian of memory row ``j``.

    ``sum_faces len * (w_r - w_l) * (aL p_l - aR p_r) + q bc^2`` as a function of
    the controlled x-drift ``bc``, with its first two derivatives.
    """
    nx, nz = w.shape
    L = _face_len(j, nz, hz)
    val = q * bc * bc
    d1 = 2.0 * q * bc
    d2 = 2.0 * q
    for i in range(nx - 1):
        b = 0.5 * (b0[i, j, 0] + b0[i + 1, j, 0]) + bc
        dw = (w[i + 1, j] - w[i, j]) * L
        pl, pr = p[i, j], p[i + 1, j]
        if fitted and Dx > 0.0:
            pe = 2.0 * b * hx / Dx
            c = 0.5 * Dx / hx
            val += dw * c * (_bernoulli(-pe) * pl - _bernoulli(pe) * pr)
            d1 += dw * (-_bernoulli_d1(-pe) * pl - _bernoulli_d1(pe) * pr)
            d2 += dw * (2.0 * hx / Dx) * (_bernoulli_d2(-pe) * pl - _bernoulli_d2(pe) * pr)
        else:
            c = 0.5 * Dx / hx
            val += dw * ((max(b, 0.0) + c) * pl - (max(-b, 0.0) + c) * pr)
            d1 += dw * ((1.0 if b > 0.0 else 0.0) * pl + (1.0 if b < 0.0 else 0.0) * pr)
    return val, d1, d2


@njit(cache=True)
def _minimise_rows(w, p, b0, Dx, hx, hz, fitted, q, guess, prev, lo, hi, out):
    """Per-row minimiser of the discrete Hamiltonian over the controlled x-drift.

    Safeguarded Newton with backtracking from the better of ``guess`` and
    ``prev``; rows with ``q <= 0`` (masked) keep ``guess``.
    """
    nz = w.shape[1]
    for j in range(nz):
        if q[j] <= 0.0:
            out[j] = guess[j]
            continue
        b = min(max(guess[j], lo), hi)
        f, g, H = _row_hamiltonian(w, p, b0, j, b, Dx, hx, hz, fitted, q[j])
        bp = min(max(prev[j], lo), hi)
        fp, gp, Hp = _row_hamiltonian(w, p, b0, j, bp, Dx, hx, hz, fitted, q[j])
        if fp < f:
            b, f, g, H = bp, fp, gp, Hp
        scale = abs(f) + q[j] * (1.0 + b * b)
        for _ in range(60):
            step = -g / H if H > 0.0 else -g / (2.0 * q[j])
            moved = False
            for _ in range(40):
                bn = min(max(b + step, lo), hi)
                if bn == b:
                    break
                fn, gn, Hn = _row_hamiltonian(w, p, b0, j, bn, Dx, hx, hz, fitted, q[j])
                if fn < f:
                    b, f, g, H = bn, fn, gn, Hn
                    moved = True
                    break
                step *= 0.5
            if not moved or abs(step) < 1e-13 * (1.0 + abs(b)) or abs(g) < 1e-13 * scale:
                break
        out[j] = b
    return out


class _Stepper:
    """Per-step coefficients of one problem, grid and memory policy."""

    def __init__(self, problem, grid, policy, boundary="extrapolate"):
        self.fitted = grid.scheme == "fitted"
        if boundary not in ("extrapolate", "reflect"):
            raise ProblemError(f"unknown value boundary closure {boundary!r}")
        self.reflect = boundary == "reflect"
        if problem.d_s != 2:
            raise ProblemError("grid solvers support d_s = 2 only")
        self.problem, self.grid, self.policy = problem, grid, policy
        self.S = grid.nodes
        self.vol = grid.weights
        self.hx, self.hz = (float(v) for v in grid.h)
        self.Dx, self.Dz = (float(v) for v in _diag_diffusion(problem))
        self.times = grid.times
        self.dt = grid.dt
        self._static = problem.is_time_invariant and problem.drift is None
        if self._static:
            self._b0 = np.ascontiguousarray(problem.uncontrolled_drift(0.0, self.S))
            self._B = problem.B_at(0.0)
            self._R = problem.R_at(0.0)
        self._fq = None
        if problem.state_cost is None and not callable(problem.Q):
            self._fq = problem.running_state_cost(0.0, self.S)
        self.g = problem.terminal(self.S)

    def drift(self, t):
        if self._static:
            return self._b0
        return np.ascontiguousarray(self.problem.uncontrolled_drift(t, self.S))

    def B(self, t):
        return self._B if self._static else self.problem.B_at(t)

    def R(self, t):
        return self._R if self._static else self.problem.R_at(t)

    def controls(self, k, u=None):
        """Memory controls at step ``k`` (from the policy unless given), ``B u`` and ``u'Ru``."""
        t = self.times[k]
        if u is None:
            u = _controls_at(self.policy, self.grid, k, t)
        bound = self.grid.control_bound
        umax = np.abs(u).max() if u.size else 0.0
        if umax > bound * (1 + 1e-9):
            raise StabilityError(
                f"control magnitude {umax:.4g} at t={t:.4g} exceeds control_bound {bound:.4g}; "
                "rebuild the grid with a larger bound"
            )
        Bu = np.ascontiguousarray(u @ self.B(t).T)
        ucost = np.einsum("ja,ab,jb->j", u, self.R(t), u)
        return u, Bu, ucost

    def state_cost(self, k):
        if self._fq is not None:
            return self._fq
        return self.problem.running_state_cost(self.times[k], self.S)

    def running_cost(self, k, ucost):
        return self.state_cost(k) + ucost[None, :]

    def fp(self, p, k):
        """Advance ``p_k`` to ``p_{k+1}`` under the policy at step ``k``."""
        _, Bu, _ = self.controls(k)
        out = np.empty_like(p)
        _fp_step(p, self.drift(self.times[k]), Bu, self.Dx, self.Dz, self.hx, self.hz, self.dt, self.vol, self.fitted, out)
        return out

    def hjb(self, w_next, k, u=None):
        """``w_k`` from ``w_{k+1}``: explicit backward step with cost and drift at step ``k``."""
        _, Bu, ucost = self.controls(k, u)
        Lw = np.empty_like(w_next)
        self.operator(w_next, self.drift(self.times[k]), Bu, Lw)
        w = w_next + self.dt * (Lw + self.running_cost(k, ucost))
        if not self.reflect:
            extrapolate_boundary(w)
        return w

    def operator(self, w, b0, Bu, out):
        return _value_operator(w, b0, Bu, self.Dx, self.Dz, self.hx, self.hz, self.vol, self.fitted, out)

    def inner(self, a, b):
        return float(np.sum(self.vol * a * b))


def extrapolate_boundary(w):
    """Fill boundary values in place by quadratic extrapolation along each axis.

    Equivalent to extending the gradient linearly past the last interior
    nodes; exact for quadratic values.  Corners use the x pass, then the z
    pass.
    """
    w[0] = 3.0 * w[1] - 3.0 * w[2] + w[3]
    w[-1] = 3.0 * w[-2] - 3.0 * w[-3] + w[-4]
    w[:, 0] = 3.0 * w[:, 1] - 3.0 * w[:, 2] + w[:, 3]
    w[:, -1] = 3.0 * w[:, -2] - 3.0 * w[:, -3] + w[:, -4]
    return w


def initial_density(problem, grid):
    """Initial Gaussian sampled at the nodes and renormalised to unit trapezoidal mass."""
    S = grid.nodes - problem.mean0
    cov = np.array(problem.cov0)
    if np.any(np.abs(cov - np.diag(np.diag(cov))) > 0) or np.any(np.diag(cov) <= 0):
        L = np.linalg.cholesky(cov)
        y = np.linalg.solve(L, S[..., None])[..., 0]
        p = np.exp(-0.5 * np.sum(y**2, axis=-1))
    else:
        p = np.exp(-0.5 * np.sum(S**2 / np.diag(cov), axis=-1))
    mass = np.sum(grid.weights * p)
    if not mass > 0:
        raise ProblemError("initial density has no mass on the grid")
    return p / mass


def _keep_steps(grid, keep):
    N = grid.n_steps
    if keep is None:
        stride = max(1, int(math.ceil(N / 200)))
        steps = set(range(0, N + 1, stride))
    elif isinstance(keep, (int, np.integer)):
        steps = set(range(0, N + 1, int(keep)))
    else:
        steps = {int(k) for k in keep if 0 <= int(k) <= N}
    steps |= {0, N}
    return np.array(sorted(steps))


def fp_forward(problem, policy, grid, keep=None, checkpoint_every=None):
    """Propagate the extended-state density forward under a memory policy.

    ``keep`` selects the retained step indices (``None``: about 200 evenly
    spaced slices; an int: a stride; or an explicit list); ``t = 0`` and
    ``t = T`` are always kept.  With ``checkpoint_every`` the density is also
    stored every that many steps for later recomputation.
    """
    st = _Stepper(problem, grid, policy)
    steps = _keep_steps(grid, keep)
    N = grid.n_steps
    p = initial_density(problem, grid)
    kept = []
    mass = np.empty(N + 1)
    mins = np.empty(N + 1)
    ecost = np.empty(N + 1)
    ckpt = {}
    keep_set = set(steps.tolist())
    for k in range(N + 1):
        mins[k] = p.min()
        if mins[k] < -NEG_TOL * max(1.0, float(p.max())):
            raise StabilityError(f"density went negative ({mins[k]:.3g}) at t={grid.times[k]:.4g}")
        if mins[k] < 0:
            p = np.maximum(p, 0.0)
        mass[k] = float(np.sum(st.vol * p))
        if abs(mass[k] - 1.0) > 1e-12:
            log.debug("mass drift %.3e at t=%.4g, renormalising", mass[k] - 1.0, grid.times[k])
            p = p / mass[k]
        if k in keep_set:
            kept.append(p.copy())
        if checkpoint_every and k % checkpoint_every == 0:
            ckpt[k] = p.copy()
        if k < N:
            _, _, ucost = st.controls(k)
            ecost[k] = st.inner(st.running_cost(k, ucost), p)
            p = st.fp(p, k)
    ecost[N] = np.nan
    if np.abs(mass - 1.0).max() > 1e-6:
        log.warning("density mass drifted by %.3e", np.abs(mass - 1.0).max())
    return DensityGrid(
        grid, steps, np.array(kept), mass, mins, ecost, st.inner(st.g, kept[-1]), ckpt
    )


def hjb_backward(problem, policy, grid, keep=None, boundary="extrapolate"):
    """Integrate the value of a memory policy backward from ``w(T, s) = g(s)``."""
    st = _Stepper(problem, grid, policy, boundary)
    steps = _keep_steps(grid, keep)
    keep_set = set(steps.tolist())
    N = grid.n_steps
    w = st.g.copy()
    kept = {N: w.copy()}
    for k in range(N - 1, -1, -1):
        w = st.hjb(w, k)
        if not np.all(np.isfinite(w)):
            raise StabilityError(f"value became non-finite at t={grid.times[k]:.4g}")
        if k in keep_set:
            kept[k] = w.copy()
    return ValueGrid(grid, steps, np.array([kept[k] for k in steps]))


def value_gradient(w, grid):
    """Centred ``dw/ds`` (second-order one-sided at the boundary), shape ``(nx, nz, 2)``."""
    gx, gz = np.gradient(w, *grid.h, edge_order=2)
    return np.stack([gx, gz], axis=-1)


def conditional_stats(p, phi, grid, eps=MASS_EPS, rel_floor=0.0):
    """``E_{p(x|z)}[phi]`` for every memory node, with a low-mass mask.

    ``phi`` has shape ``(nx, nz)`` or ``(nx, nz, m)``.  Returns
    ``(values, mask)``; masked nodes (memory marginal below ``eps`` or below
    ``rel_floor`` times its maximum) hold 0.
    """
    p = np.asarray(p, dtype=float)
    phi = np.asarray(phi, dtype=float)
    wx = np.full(grid.n[0], grid.h[0])
    wx[[0, -1]] *= 0.5
    den = wx @ p
    mask = den < max(eps, rel_floor * float(den.max()))
    safe = np.where(mask, 1.0, den)
    if phi.ndim == 2:
        num = wx @ (phi * p)
        out = num / safe
    else:
        num = np.einsum("i,ij,ijm->jm", wx, p, phi)
        out = num / safe[:, None]
    out[mask] = 0.0
    return out, mask


def _feedback_matrix(problem, t):
    """``-1/2 R^-1 B'``, mapping an expected gradient to the optimal control."""
    R, B = problem.R_at(t), problem.B_at(t)
    return -0.5 * np.linalg.solve(R, B.T)


def control_from(problem, grid, p, w, t, fallback=0.0, rel_floor=0.0):
    """Minimiser of the conditional expected Hamiltonian at one time slice."""
    grad = value_gradient(w, grid)
    e, mask = conditional_stats(p, grad, grid, rel_floor=rel_floor)
    u = e @ _feedback_matrix(problem, t).T
    u[mask] = fallback
    return u, mask


def separable_control(problem, t):
    """Whether the control moves only ``x`` (scalar ``x``), so rows of the Hamiltonian decouple."""
    B = problem.B_at(t)
    return problem.d_x == 1 and B.shape[0] == 2 and not np.any(B[1])


def refine_control(st, k, p, w, u, prev, mask, bound=None):
    """Exact minimiser of the discrete conditional Hamiltonian, row by row in ``z``.

    Applies when the memory is uncontrolled and ``x`` is scalar: the control of
    row ``j`` then enters only the x-faces of that row, through the scalar
    drift ``bc = B_x u``.  The optimal ``u`` is ``bc / gamma * R^-1 B_x'`` with
    ``gamma = B_x R^-1 B_x'``, and ``bc`` minimises the row Hamiltonian
    ``Phi_j(bc) + m_j bc^2 / gamma`` (``m_j`` the row's probability mass), which the
    centred-gradient formula ``u`` only approximates at high cell Peclet
    number.  ``u`` and ``prev`` seed the search; masked rows keep ``u``.
    """
    t = st.times[k]
    Bx = st.B(t)[0]
    v = np.linalg.solve(st.R(t), Bx)
    gamma = float(Bx @ v)
    if gamma <= 0.0:
        return u
    wx = np.full(st.grid.n[0], st.hx)
    wx[[0, -1]] *= 0.5
    wz = np.full(st.grid.n[1], st.hz)
    wz[[0, -1]] *= 0.5
    q = np.where(mask, 0.0, wz * (wx @ p)) / gamma
    lim = np.inf if bound is None else bound * gamma / np.abs(v).max()
    out = np.empty(u.shape[0])
    _minimise_rows(
        np.ascontiguousarray(w), np.ascontiguousarray(p), st.drift(t), st.Dx, st.hx, st.hz, st.fitted,
        q, u @ Bx, prev @ Bx, -lim, lim, out,
    )
    res = np.outer(out / gamma, v)
    res[mask] = u[mask]
    return res


def optimal_control_field(p, w, problem, fallback=0.0):
    """``u*(t_k, z_j) = -1/2 R^-1 B' E_{p_k(x|z_j)}[dw_{k+1}/ds]`` at retained steps.

    The density at step ``k`` is paired with the value at step ``k + 1``
    (the value the explicit step from ``t_k`` reads); where ``k + 1`` is not
    retained, the value at ``k`` is used.
    """
    grid = p.grid
    steps = [k for k in p.steps if k in set(w.steps.tolist())]
    vals, masks = [], []
    wsteps = set(w.steps.tolist())
    for k in steps:
        kk = k + 1 if (k + 1) in wsteps else k
        u, m = control_from(problem, grid, p.at(k), w.at(kk), grid.times[k], fallback)
        vals.append(u)
        masks.append(m)
    return PolicyGridField(grid.times[steps], grid.z, np.array(vals), np.array(masks), fallback)


def cosc_control_field(w, problem, grid=None):
    """Pointwise full-state minimiser ``u*(s) = -1/2 R^-1 B' dw/ds`` for one value slice.

    Returns an array of shape ``(nx, nz, d_u)``.
    """
    if isinstance(w, ValueGrid):
        grid = w.grid
        return np.stack([cosc_control_field(w.values[i], problem, grid) for i in range(len(w.steps))])
    grad = value_gradient(w, grid)
    return grad @ _feedback_matrix(problem, 0.0).T


@dataclass
class FullStatePolicyGrid:
    """Full-state control ``u(t, x, z)`` on a strided time lattice (bilinear in space)."""

    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    values: np.ndarray
    d_x: int = 1


@dataclass
class CoscSolution:
    value: ValueGrid
    policy: FullStatePolicyGrid
    objective: float
    saturated: int = 0


def solve_cosc(problem, grid, policy_stride=None, keep=None, boundary="extrapolate", saturate=False):
    """Completely observable HJB with pointwise Hamiltonian minimisation.

    At every step the control ``u*(s) = -1/2 R^-1 B' dw/ds`` is formed from
    the centred gradient of ``w_{k+1}`` and the value is advanced with the
    same operator as :func:`hjb_backward`.  Controls beyond the grid's
    ``control_bound`` raise :class:`StabilityError`, or are clipped to it
    when ``saturate`` is set (the count is returned).  Returns the value,
    the full-state policy sampled every ``policy_stride`` steps (default:
    about 1000 slices) and the grid objective ``<w_0, p_0>``.
    """
    if not problem.is_time_invariant:
        raise ProblemError("full-state grid solver needs time-invariant B, R and diffusion")
    st = _Stepper(problem, grid, PolicyGridField.zeros(grid, problem.d_u), boundary)
    B, R = problem.B_at(0.0), problem.R_at(0.0)
    F = _feedback_matrix(problem, 0.0)
    N = grid.n_steps
    stride = policy_stride or max(1, int(math.ceil(N / 1000)))
    pol_steps = set(range(0, N + 1, stride)) | {N}
    steps = _keep_steps(grid, keep)
    keep_set = set(steps.tolist())
    w = st.g.copy()
    kept = {N: w.copy()}
    Lw = np.empty_like(w)
    zero_bu = np.zeros((grid.n[1], 2))
    pol = {}
    bound = grid.control_bound
    n_sat = 0

    def controls(w, t):
        nonlocal n_sat
        u = value_gradient(w, grid) @ F.T
        umax = np.abs(u).max()
        if saturate:
            n_sat += int(np.count_nonzero(np.abs(u) > bound))
            return np.clip(u, -bound, bound)
        if umax > bound * (1 + 1e-9):
            raise StabilityError(
                f"full-state control {umax:.4g} at t={t:.4g} exceeds control_bound {bound:.4g}"
            )
        return u

    for k in range(N - 1, -1, -1):
        t = grid.times[k]
        u = controls(w, t)
        if k + 1 in pol_steps:
            pol[k + 1] = u
        b = np.ascontiguousarray(st.drift(t) + u @ B.T)
        ucost = np.einsum("ija,ab,ijb->ij", u, R, u)
        st.operator(w, b, zero_bu, Lw)
        w = w + grid.dt * (Lw + st.state_cost(k) + ucost)
        if not st.reflect:
            extrapolate_boundary(w)
        if not np.all(np.isfinite(w)):
            raise StabilityError(f"value became non-finite at t={t:.4g}")
        if k in keep_set:
            kept[k] = w.copy()
    pol[0] = controls(w, 0.0)
    ordered = sorted(pol)
    p0 = initial_density(problem, grid)
    policy = FullStatePolicyGrid(
        grid.times[ordered], grid.x, grid.z, np.array([pol[k] for k in ordered]), problem.d_x
    )
    value = ValueGrid(grid, steps, np.array([kept[k] for k in steps]))
    if n_sat:
        log.info("full-state solver: %d control entries saturated at +-%g", n_sat, bound)
    return CoscSolution(value, policy, st.inner(w, p0), n_sat)


def duality_residual(problem, policy, grid, boundary="reflect"):
    """Per-step defect of the discrete duality identity.

    ``r_k = (<w_{k+1}, p_{k+1}> - <w_k, p_k>) / dt + <f_k, p_k>`` with ``p``
    from :func:`fp_forward` and ``w`` from :func:`hjb_backward` under the same
    policy.  With the reflecting closure the value step is the exact adjoint
    of the density step and ``r`` is round-off; the extrapolating closure
    leaves a boundary term.  Stores every slice, so intended for modest grids.
    """
    dens = fp_forward(problem, policy, grid, keep=1)
    val = hjb_backward(problem, policy, grid, keep=1, boundary=boundary)
    vol = grid.weights
    pair = np.einsum("kij,kij,ij->k", val.values, dens.values, vol)
    return np.diff(pair) / grid.dt + dens.expected_cost[:-1]
