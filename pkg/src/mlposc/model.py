"""State, observation and memory models and their extended-state composition.

The extended state is ``s = (x, z)``: the first ``d_x`` coordinates are the
physical state, the last ``d_z`` the controller memory.  Noise channels of the
extended diffusion are stacked in the fixed order (state, observation, memory
noise).  Coefficients may be constant arrays or callables of time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from ._validation import (
    ProblemError,
    as_matrix,
    as_vector,
    freeze,
    is_pd,
    is_psd,
    is_symmetric,
    min_eig,
)

Coefficient = Union[np.ndarray, Callable[[float], np.ndarray]]


def _coef(value, name, shape=None):
    """Freeze a constant coefficient, or wrap a time-dependent one."""
    if callable(value):
        probe = as_matrix(value(0.0), name, shape)
        shape = probe.shape
        return _TimeVarying(value, shape, name)
    return freeze(as_matrix(value, name, shape))


@dataclass(frozen=True)
class _TimeVarying:
    fn: Callable[[float], np.ndarray]
    shape: tuple
    name: str

    def __call__(self, t):
        return as_matrix(self.fn(t), self.name, self.shape)


def evaluate(coef, t):
    """Value of a (possibly time-varying) coefficient at time ``t``."""
    return coef(t) if callable(coef) else coef


def _shape(coef):
    return coef.shape


@dataclass(frozen=True)
class StateModel:
    """Linear state SDE ``dx = (A x + B u) dt + sigma dw``.

    ``drift`` optionally replaces ``A x`` by a vectorised field ``b(t, x)``
    acting on arrays of shape ``(..., d_x)``; the control still enters through
    ``B``.
    """

    A: Coefficient
    B: Coefficient
    sigma: Coefficient
    mean0: np.ndarray
    cov0: np.ndarray
    drift: Optional[Callable] = None

    def __post_init__(self):
        A = _coef(self.A, "A")
        d_x = _shape(A)[0]
        if _shape(A) != (d_x, d_x):
            raise ProblemError(f"A must be square, got {_shape(A)}")
        B = _coef(self.B, "B")
        sigma = _coef(self.sigma, "sigma")
        if _shape(B)[0] != d_x:
            raise ProblemError(f"B has {_shape(B)[0]} rows, expected d_x={d_x}")
        if _shape(sigma)[0] != d_x:
            raise ProblemError(f"sigma has {_shape(sigma)[0]} rows, expected d_x={d_x}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "mean0", freeze(as_vector(self.mean0, "mean0", d_x)))
        object.__setattr__(self, "cov0", freeze(as_matrix(self.cov0, "cov0", (d_x, d_x))))

    @property
    def d_x(self):
        return _shape(self.A)[0]

    @property
    def d_u(self):
        return _shape(self.B)[1]

    @property
    def d_w(self):
        return _shape(self.sigma)[1]


@dataclass(frozen=True)
class ObservationModel:
    """Observation SDE ``dy = H x dt + gamma dnu``."""

    H: Coefficient
    gamma: Coefficient

    def __post_init__(self):
        H = _coef(self.H, "H")
        gamma = _coef(self.gamma, "gamma")
        if _shape(gamma)[0] != _shape(H)[0]:
            raise ProblemError(
                f"gamma has {_shape(gamma)[0]} rows, expected d_y={_shape(H)[0]}"
            )
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "gamma", gamma)

    @property
    def d_y(self):
        return _shape(self.H)[0]

    @property
    def d_nu(self):
        return _shape(self.gamma)[1]


@dataclass(frozen=True)
class MemoryModel:
    """Memory SDE ``dz = (C z + v) dt + kappa dy + eta dxi``.

    ``kappa`` does not depend on ``z``.  ``C`` is an intrinsic linear drift
    (zero by default).  With ``controlled=False`` there is no memory control
    ``v``; with ``eta=None`` there is no intrinsic memory noise channel.
    """

    kappa: Coefficient
    mean0: np.ndarray
    cov0: np.ndarray
    eta: Optional[Coefficient] = None
    C: Optional[Coefficient] = None
    controlled: bool = True

    def __post_init__(self):
        kappa = _coef(self.kappa, "kappa")
        d_z = _shape(kappa)[0]
        object.__setattr__(self, "kappa", kappa)
        if self.eta is not None:
            eta = _coef(self.eta, "eta")
            if _shape(eta)[0] != d_z:
                raise ProblemError(f"eta has {_shape(eta)[0]} rows, expected d_z={d_z}")
            object.__setattr__(self, "eta", eta)
        C = np.zeros((d_z, d_z)) if self.C is None else self.C
        object.__setattr__(self, "C", _coef(C, "C", (d_z, d_z)))
        object.__setattr__(self, "mean0", freeze(as_vector(self.mean0, "memory mean0", d_z)))
        object.__setattr__(self, "cov0", freeze(as_matrix(self.cov0, "memory cov0", (d_z, d_z))))

    @property
    def d_z(self):
        return _shape(self.kappa)[0]

    @property
    def d_v(self):
        return self.d_z if self.controlled else 0

    @property
    def d_xi(self):
        return 0 if self.eta is None else _shape(self.eta)[1]


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``x'Qx + u'Ru + v'Mv`` and terminal cost ``x'Px`` on ``[0, T]``.

    ``state_cost(t, x)`` and ``terminal_cost(x)`` optionally replace the
    quadratic state terms by vectorised non-quadratic fields; the control
    cost always stays quadratic.
    """

    Q: Coefficient
    R: Coefficient
    P: np.ndarray
    T: float
    M: Optional[Coefficient] = None
    state_cost: Optional[Callable] = None
    terminal_cost: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "Q", _coef(self.Q, "Q"))
        object.__setattr__(self, "R", _coef(self.R, "R"))
        object.__setattr__(self, "P", freeze(as_matrix(self.P, "P")))
        if self.M is not None:
            object.__setattr__(self, "M", _coef(self.M, "M"))
        if not np.isfinite(self.T) or self.T <= 0:
            raise ProblemError(f"horizon T must be positive, got {self.T}")


@dataclass(frozen=True)
class ExtendedProblem:
    """Control problem on the extended state ``s = (x, z)``.

    Dynamics ``ds = (A s + B u) dt + sigma dw`` (or ``drift(t, s) + B u``),
    running cost ``s'Qs + u'Ru`` (or ``state_cost(t, s) + u'Ru``) and
    terminal cost ``s'Ps`` (or ``terminal_cost(s)``).  Admissible controls
    depend on ``z = s[d_x:]`` only.
    """

    A: Coefficient
    B: Coefficient
    sigma: Coefficient
    Q: Coefficient
    R: Coefficient
    P: np.ndarray
    mean0: np.ndarray
    cov0: np.ndarray
    d_x: int
    T: float
    drift: Optional[Callable] = None
    state_cost: Optional[Callable] = None
    terminal_cost: Optional[Callable] = None
    name: str = "problem"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        A = _coef(self.A, "A")
        d_s = _shape(A)[0]
        if _shape(A) != (d_s, d_s):
            raise ProblemError(f"A must be square, got {_shape(A)}")
        if not 0 < self.d_x < d_s:
            raise ProblemError(f"d_x={self.d_x} must lie in (0, d_s={d_s})")
        B = _coef(self.B, "B")
        if _shape(B)[0] != d_s:
            raise ProblemError(f"B has {_shape(B)[0]} rows, expected d_s={d_s}")
        d_u = _shape(B)[1]
        sigma = _coef(self.sigma, "sigma")
        if _shape(sigma)[0] != d_s:
            raise ProblemError(f"sigma has {_shape(sigma)[0]} rows, expected d_s={d_s}")
        for name, value, shape in (
            ("A", A, None),
            ("B", B, None),
            ("sigma", sigma, None),
            ("Q", self.Q, (d_s, d_s)),
            ("R", self.R, (d_u, d_u)),
            ("P", self.P, (d_s, d_s)),
        ):
            object.__setattr__(self, name, value if shape is None else _coef(value, name, shape))
        object.__setattr__(self, "P", freeze(as_matrix(self.P, "P", (d_s, d_s))))
        object.__setattr__(self, "mean0", freeze(as_vector(self.mean0, "mean0", d_s)))
        object.__setattr__(self, "cov0", freeze(as_matrix(self.cov0, "cov0", (d_s, d_s))))
        if not np.isfinite(self.T) or self.T <= 0:
            raise ProblemError(f"horizon T must be positive, got {self.T}")

    @property
    def d_s(self):
        return _shape(self.A)[0]

    @property
    def d_z(self):
        return self.d_s - self.d_x

    @property
    def d_u(self):
        return _shape(self.B)[1]

    @property
    def d_w(self):
        return _shape(self.sigma)[1]

    @property
    def is_lqg(self):
        """True when dynamics are linear and every cost term is quadratic."""
        return self.drift is None and self.state_cost is None and self.terminal_cost is None

    @property
    def is_time_invariant(self):
        return not any(callable(c) for c in (self.A, self.B, self.sigma, self.Q, self.R))

    def A_at(self, t):
        return evaluate(self.A, t)

    def B_at(self, t):
        return evaluate(self.B, t)

    def sigma_at(self, t):
        return evaluate(self.sigma, t)

    def D_at(self, t):
        s = evaluate(self.sigma, t)
        return s @ s.T

    def Q_at(self, t):
        return evaluate(self.Q, t)

    def R_at(self, t):
        return evaluate(self.R, t)

    def uncontrolled_drift(self, t, S):
        """Drift without the control term, for states ``S`` of shape (..., d_s)."""
        if self.drift is not None:
            return np.asarray(self.drift(t, S), dtype=float)
        return S @ self.A_at(t).T

    def running_state_cost(self, t, S):
        """State part of the running cost for states of shape (..., d_s)."""
        if self.state_cost is not None:
            return np.asarray(self.state_cost(t, S), dtype=float)
        Q = self.Q_at(t)
        return np.einsum("...i,ij,...j->...", S, Q, S)

    def terminal(self, S):
        if self.terminal_cost is not None:
            return np.asarray(self.terminal_cost(S), dtype=float)
        return np.einsum("...i,ij,...j->...", S, self.P, S)


def compose_extended(state, obs, mem, cost, name="problem"):
    """Compose state, observation and memory models into one extended problem.

    Block layout (noise channels ordered state, observation, memory noise)::

        A~ = [[A, 0], [kappa H, C]]     B~ = [[B, 0], [0, I]]
        sigma~ = [[sigma, 0, 0], [0, kappa gamma, eta]]
        Q~ = diag(Q, 0)   R~ = diag(R, M)   P~ = diag(P, 0)

    The memory-control column block of ``B~`` and the ``M`` block are present
    only for a controlled memory; the ``eta`` column block only when the
    memory has its own noise.  The initial law is the product of the state
    and memory Gaussians.
    """
    d_x, d_z, d_u = state.d_x, mem.d_z, state.d_u
    if _shape(obs.H)[1] != d_x:
        raise ProblemError(f"H has {_shape(obs.H)[1]} columns, expected d_x={d_x}")
    if _shape(mem.kappa)[1] != obs.d_y:
        raise ProblemError(f"kappa has {_shape(mem.kappa)[1]} columns, expected d_y={obs.d_y}")
    if _shape(cost.Q) != (d_x, d_x):
        raise ProblemError(f"Q has shape {_shape(cost.Q)}, expected {(d_x, d_x)}")
    if _shape(cost.R) != (d_u, d_u):
        raise ProblemError(f"R has shape {_shape(cost.R)}, expected {(d_u, d_u)}")
    if cost.P.shape != (d_x, d_x):
        raise ProblemError(f"P has shape {cost.P.shape}, expected {(d_x, d_x)}")
    if mem.controlled:
        if cost.M is None:
            raise ProblemError("controlled memory requires a memory-control weight M")
        if _shape(cost.M) != (d_z, d_z):
            raise ProblemError(f"M has shape {_shape(cost.M)}, expected {(d_z, d_z)}")
    d_v = mem.d_v
    d_w, d_nu, d_xi = state.d_w, obs.d_nu, mem.d_xi

    def A_fn(t):
        out = np.zeros((d_x + d_z, d_x + d_z))
        out[:d_x, :d_x] = evaluate(state.A, t)
        out[d_x:, :d_x] = evaluate(mem.kappa, t) @ evaluate(obs.H, t)
        out[d_x:, d_x:] = evaluate(mem.C, t)
        return out

    def B_fn(t):
        out = np.zeros((d_x + d_z, d_u + d_v))
        out[:d_x, :d_u] = evaluate(state.B, t)
        if d_v:
            out[d_x:, d_u:] = np.eye(d_v)
        return out

    def sigma_fn(t):
        out = np.zeros((d_x + d_z, d_w + d_nu + d_xi))
        out[:d_x, :d_w] = evaluate(state.sigma, t)
        out[d_x:, d_w : d_w + d_nu] = evaluate(mem.kappa, t) @ evaluate(obs.gamma, t)
        if d_xi:
            out[d_x:, d_w + d_nu :] = evaluate(mem.eta, t)
        return out

    def Q_fn(t):
        out = np.zeros((d_x + d_z, d_x + d_z))
        out[:d_x, :d_x] = evaluate(cost.Q, t)
        return out

    def R_fn(t):
        out = np.zeros((d_u + d_v, d_u + d_v))
        out[:d_u, :d_u] = evaluate(cost.R, t)
        if d_v:
            out[d_u:, d_u:] = evaluate(cost.M, t)
        return out

    def _maybe_const(fn, *parts):
        return fn if any(callable(p) for p in parts) else fn(0.0)

    P = np.zeros((d_x + d_z, d_x + d_z))
    P[:d_x, :d_x] = cost.P
    cov0 = np.zeros((d_x + d_z, d_x + d_z))
    cov0[:d_x, :d_x] = state.cov0
    cov0[d_x:, d_x:] = mem.cov0

    drift = None
    if state.drift is not None:
        state_drift = state.drift

        def drift(t, S):
            S = np.asarray(S, dtype=float)
            x, z = S[..., :d_x], S[..., d_x:]
            out = np.empty_like(S)
            out[..., :d_x] = state_drift(t, x)
            out[..., d_x:] = x @ (evaluate(mem.kappa, t) @ evaluate(obs.H, t)).T + z @ evaluate(mem.C, t).T
            return out

    state_cost = None
    if cost.state_cost is not None:
        sc = cost.state_cost

        def state_cost(t, S):
            return sc(t, np.asarray(S)[..., :d_x])

    terminal_cost = None
    if cost.terminal_cost is not None:
        tc = cost.terminal_cost

        def terminal_cost(S):
            return tc(np.asarray(S)[..., :d_x])

    problem = ExtendedProblem(
        A=_maybe_const(A_fn, state.A, mem.kappa, obs.H, mem.C),
        B=_maybe_const(B_fn, state.B),
        sigma=_maybe_const(sigma_fn, state.sigma, mem.kappa, obs.gamma, mem.eta),
        Q=_maybe_const(Q_fn, cost.Q),
        R=_maybe_const(R_fn, cost.R, cost.M),
        P=P,
        mean0=np.concatenate([state.mean0, mem.mean0]),
        cov0=cov0,
        d_x=d_x,
        T=float(cost.T),
        drift=drift,
        state_cost=state_cost,
        terminal_cost=terminal_cost,
        name=name,
        meta={"d_u": d_u, "d_v": d_v, "d_y": obs.d_y, "noise_channels": (d_w, d_nu, d_xi)},
    )
    report = validate_problem(problem)
    if not report.ok:
        raise ProblemError("; ".join(report.errors))
    return problem


@dataclass(frozen=True)
class Diagnostics:
    """Outcome of :func:`validate_problem`: one entry per named check."""

    checks: tuple

    @property
    def ok(self):
        return all(passed for _, passed, _ in self.checks)

    @property
    def errors(self):
        return [msg for _, passed, msg in self.checks if not passed]

    def __getitem__(self, name):
        for check, passed, _ in self.checks:
            if check == name:
                return passed
        raise KeyError(name)


def validate_problem(p, obs=None, grid=None, times=(0.0,)):
    """Report positivity, invertibility and stability checks for a problem.

    Never raises.  ``obs`` adds the observation-noise invertibility check;
    ``grid`` (a :class:`mlposc.pde.GridSpec`) adds a time-step feasibility
    hint for explicit grid solvers.
    """
    checks = []

    def add(name, passed, msg):
        checks.append((name, bool(passed), msg))

    for t in times:
        R = p.R_at(t)
        add("R_pd", is_pd(R), "R not positive definite")
        if p.state_cost is None:
            add("Q_psd", is_psd(p.Q_at(t)), "Q not positive semidefinite")
        D = p.D_at(t)
        add("D_psd", is_psd(D), "diffusion matrix not positive semidefinite")
    if p.terminal_cost is None:
        add("P_psd", is_psd(p.P), "P not positive semidefinite")
    add("cov0_symmetric", is_symmetric(p.cov0), "Sigma0 not symmetric")
    add(
        "cov0_psd",
        is_psd(p.cov0),
        f"Sigma0 not positive semidefinite (min eigenvalue {min_eig(p.cov0):.3g})",
    )
    if obs is not None:
        g = evaluate(obs.gamma, 0.0)
        add("gamma_gamma_T_pd", is_pd(g @ g.T), "gamma gamma^T singular")
    if grid is not None:
        stable = grid.dt <= grid.dt_max * (1 + 1e-12)
        add("grid_cfl", stable, f"grid time step {grid.dt:.3g} exceeds stability bound {grid.dt_max:.3g}")
    return Diagnostics(tuple(checks))
