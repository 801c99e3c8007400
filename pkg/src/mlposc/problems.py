"""Ready-made problem instances used by the experiments and tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CostSpec, MemoryModel, ObservationModel, StateModel, compose_extended


@dataclass(frozen=True)
class ObstacleRegion:
    """Time window times a band ``lo <= |x| <= hi`` with a constant penalty."""

    t_start: float = 0.3
    t_end: float = 0.6
    lo: float = 0.1
    hi: float = 2.0
    weight: float = 1000.0

    def active(self, t):
        return self.t_start <= t <= self.t_end

    def inside(self, t, x):
        ax = np.abs(x)
        return self.active(t) & (ax >= self.lo) & (ax <= self.hi)

    def cost(self, t, x):
        x = np.asarray(x, dtype=float)
        if not self.active(t):
            return np.zeros(x.shape[:-1])
        return self.weight * np.all(self.inside(t, x), axis=-1).astype(float)


def memory_limited_lqg(
    A=1.0, B=1.0, sigma=1.0, H=1.0, gamma=1.0, kappa=1.0,
    Q=1.0, R=1.0, M=1.0, P=0.0, T=10.0, eta=None,
    x_mean0=0.0, x_var0=1.0, z_mean0=0.0, z_var0=1.0,
):
    """Scalar linear system with a one-dimensional, controlled, costly memory.

    Defaults give the unstable plant ``dx = (x + u) dt + dw`` observed through
    ``dy = x dt + dnu`` with memory ``dz = v dt + dy``, unit weights, no
    terminal cost, ``T = 10`` and standard Gaussian initial state and memory.
    """
    state = StateModel(A, B, sigma, [x_mean0], [[x_var0]])
    obs = ObservationModel(H, gamma)
    mem = MemoryModel(kappa, [z_mean0], [[z_var0]], eta=eta)
    cost = CostSpec(Q, R, P, T, M=M)
    return compose_extended(state, obs, mem, cost, name="lqg-memlim")


def obstacle_problem(region=None, terminal_weight=10.0, T=1.0, var0=0.01):
    """Integrator with a time-windowed obstacle band and an uncontrolled memory.

    ``dx = u dt + dw``, ``dy = x dt + dnu``, ``dz = dy``; running cost
    ``Q(t, x) + u^2`` with the obstacle penalty ``Q`` and terminal cost
    ``terminal_weight * x^2``; ``x_0, z_0 ~ N(0, var0)`` independently.
    """
    region = ObstacleRegion() if region is None else region
    state = StateModel(0.0, 1.0, 1.0, [0.0], [[var0]])
    obs = ObservationModel(1.0, 1.0)
    mem = MemoryModel(1.0, [0.0], [[var0]], controlled=False)
    cost = CostSpec(
        0.0, 1.0, terminal_weight, T,
        state_cost=region.cost,
        terminal_cost=lambda x: terminal_weight * np.sum(np.asarray(x) ** 2, axis=-1),
    )
    problem = compose_extended(state, obs, mem, cost, name="nonlqg-obstacle")
    problem.meta.update(region=region, terminal_weight=terminal_weight, state=state, obs=obs, cost=cost)
    return problem


def obstacle_models(terminal_weight=10.0, T=1.0, var0=0.01):
    """State, observation and quadratic cost parts of the obstacle problem with the obstacle removed."""
    state = StateModel(0.0, 1.0, 1.0, [0.0], [[var0]])
    obs = ObservationModel(1.0, 1.0)
    cost = CostSpec(0.0, 1.0, terminal_weight, T)
    return state, obs, cost


def kalman_setting(A=1.0, B=1.0, sigma=1.0, H=1.0, gamma=1.0, Q=1.0, R=1.0, P=0.0, T=10.0, var0=1.0):
    """Scalar LQG problem without memory limitation, for the filter-equivalence check."""
    state = StateModel(A, B, sigma, [0.0], [[var0]])
    obs = ObservationModel(H, gamma)
    cost = CostSpec(Q, R, P, T)
    return state, obs, cost
