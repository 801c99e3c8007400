"""Forward-backward sweep coupling the density and value solvers.

Each iteration propagates the density forward under the current memory
policy, integrates the value backward under the same policy, and replaces
the policy by the minimiser of the conditional expected Hamiltonian.  The
backward pass recomputes densities segment by segment from checkpoints, so
memory stays at ``O(sqrt(N))`` slices.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import ProblemError
from .pde import (
    PolicyGridField,
    _Stepper,
    control_from,
    fp_forward,
    refine_control,
    separable_control,
    hjb_backward,
    initial_density,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    """Stopping and relaxation settings of the sweep.

    ``damping`` is the relaxation weight ``lam`` in
    ``u <- (1 - lam) u + lam u_new``; the objective is recorded every
    ``objective_every`` iterations (it comes for free from the forward pass).
    ``update`` selects whether the backward pass already uses the new
    control (``"backward"``) or the current policy (``"frozen"``).
    ``boundary`` is the value closure at the grid edge; the default
    ``"reflect"`` keeps the value step the exact adjoint of the density
    step, which makes each undamped backward-update iteration non-increasing
    in the grid objective.  ``control="exact"`` replaces the centred-gradient
    minimiser by the exact minimiser of the discrete Hamiltonian whenever the
    memory is uncontrolled (rows in ``z`` then decouple); otherwise, and with
    ``control="centred"``, the centred-gradient formula is used.  Memory nodes whose marginal is below ``mass_floor`` times its maximum at
    that time are masked.
    """

    max_iter: int = 50
    tol: float = 1e-4
    damping: float = 1.0
    objective_every: int = 1
    fallback: float = 0.0
    update: str = "backward"
    mass_floor: float = 1e-6
    boundary: str = "reflect"
    backtrack: bool = False
    min_damping: float = 1e-3
    objective_slack: float = 1e-9
    control: str = "exact"

    def __post_init__(self):
        if not self.tol > 0:
            raise ProblemError(f"tolerance must be positive, got {self.tol}")
        if not 0 < self.damping <= 1:
            raise ProblemError(f"damping must lie in (0, 1], got {self.damping}")
        if not 0 <= self.mass_floor < 1:
            raise ProblemError(f"mass_floor must lie in [0, 1), got {self.mass_floor}")
        if self.boundary not in ("reflect", "extrapolate"):
            raise ProblemError(f"boundary must be 'reflect' or 'extrapolate', got {self.boundary!r}")
        if self.update not in ("backward", "frozen"):
            raise ProblemError(f"update must be 'backward' or 'frozen', got {self.update!r}")
        if self.control not in ("exact", "centred"):
            raise ProblemError(f"control must be 'exact' or 'centred', got {self.control!r}")
        if self.max_iter < 1 or self.objective_every < 1:
            raise ProblemError("max_iter and objective_every must be at least 1")


@dataclass
class SweepReport:
    """Per-iteration sup-norm control change and objective of the sweep.

    Entries are recorded for accepted iterates: ``objectives[n]`` is the grid
    objective of the policy whose control change is ``control_changes[n]``
    (``nan`` when not recorded) and ``damping[n]`` the relaxation weight
    applied after it.  ``rejected`` lists the iteration numbers whose relaxed
    policy was discarded; ``iterations`` counts every forward-backward pass.
    """

    control_changes: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    tol: float = float("nan")
    saturated: list = field(default_factory=list)
    damping: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def rows(self):
        return [
            (i + 1, c, o) for i, (c, o) in enumerate(zip(self.control_changes, self.objectives))
        ]

    @property
    def objective_increases(self):
        """Largest increase of the objective between consecutive iterations."""
        J = np.asarray([o for o in self.objectives if np.isfinite(o)])
        return float(np.max(np.diff(J), initial=0.0)) if len(J) > 1 else 0.0


def _sweep_iteration(
    problem, grid, policy, fallback, update="backward", bound=None, mass_floor=0.0, boundary="reflect",
    exact=False,
):
    """One forward and one backward pass; returns ``(u_new, mask, objective, n_saturated)``.

    With ``update="backward"`` the value is integrated backward under the
    new control as soon as it is computed at each step (the value then
    solves the minimised HJB equation given the forward density); with
    ``update="frozen"`` it is integrated under the current policy.
    """
    st = _Stepper(problem, grid, policy, boundary)
    N = grid.n_steps
    m = max(1, int(math.ceil(math.sqrt(N))))
    p = initial_density(problem, grid)
    ckpt = {}
    running = 0.0
    for k in range(N):
        if k % m == 0:
            ckpt[k] = p
        _, _, ucost = st.controls(k)
        running += st.inner(st.running_cost(k, ucost), p)
        p = np.maximum(st.fp(p, k), 0.0)
        p /= np.sum(st.vol * p)
    objective = grid.dt * running + st.inner(st.g, p)

    u_new = np.empty_like(policy.values)
    mask = np.zeros(policy.values.shape[:2], dtype=bool)
    n_sat = 0

    def new_control(k, dens, w):
        nonlocal n_sat
        u, mask[k] = control_from(problem, grid, dens, w, grid.times[k], fallback, mass_floor)
        if exact and separable_control(problem, grid.times[k]):
            u = refine_control(st, k, dens, w, u, policy.values[k], mask[k], bound)
        if bound is not None:
            n_sat += int(np.count_nonzero(np.abs(u) > bound))
            u = np.clip(u, -bound, bound)
        u_new[k] = u

    w = st.g.copy()
    new_control(N, p, w)
    starts = sorted(ckpt, reverse=True)
    for c in starts:
        stop = min(c + m, N)
        seg = [ckpt[c]]
        for k in range(c, stop - 1):
            q = np.maximum(st.fp(seg[-1], k), 0.0)
            seg.append(q / np.sum(st.vol * q))
        for k in range(stop - 1, c - 1, -1):
            # w holds w_{k+1} here
            new_control(k, seg[k - c], w)
            w = st.hjb(w, k, u_new[k] if update == "backward" else None)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"value became non-finite during the sweep at t={grid.times[c]:.4g}")
    return u_new, mask, objective, n_sat


def _blend(grid, policy, u_new, mask, lam, fallback):
    values = (1.0 - lam) * policy.values + lam * u_new
    values[mask] = fallback
    return PolicyGridField(grid.times, grid.z, values, mask, fallback)


def solve_ml_posc(problem, grid, config=None, initial=None, keep=None):
    """Forward-backward sweep for the memory-limited optimal control field.

    Starts from ``u = 0`` (or ``initial``) and iterates until the sup-norm
    change of the control over unmasked ``(t, z)`` nodes drops below
    ``config.tol``.  Updated controls are saturated at the grid's
    ``control_bound`` so the explicit step stays stable; the number of
    saturated entries per iteration is reported.

    With ``config.backtrack`` a relaxed policy whose objective exceeds that
    of the last accepted policy is rejected: the relaxation weight is halved
    and the step is retaken from the accepted policy.  After an accepted
    step the weight doubles again, up to ``config.damping``.

    Returns ``(policy, density, value, report)`` where the density and value
    are recomputed under the returned policy.
    """
    config = config or SweepConfig()
    if problem.d_s != 2:
        raise ProblemError("grid sweep supports d_s = 2 only")
    policy = initial or PolicyGridField.zeros(grid, problem.d_u)
    if policy.values.shape[0] != grid.n_steps + 1:
        raise ProblemError("initial policy must live on the grid time lattice")
    report = SweepReport(tol=config.tol)
    lam = config.damping
    accepted = None  # (policy, u_new, mask, objective) of the last accepted iterate
    change = float("nan")
    for it in range(1, config.max_iter + 1):
        u_new, mask, J, n_sat = _sweep_iteration(
            problem, grid, policy, config.fallback, config.update, grid.control_bound, config.mass_floor,
            config.boundary, config.control == "exact",
        )
        report.iterations = it
        if n_sat:
            log.info("sweep %d: %d control entries saturated at +-%g", it, n_sat, grid.control_bound)
        if config.backtrack and accepted is not None and J > accepted[3] + config.objective_slack * abs(accepted[3]):
            lam *= 0.5
            report.rejected.append(it)
            log.info("sweep %d: objective %.6g above %.6g, relaxation weight now %.3g", it, J, accepted[3], lam)
            if lam < config.min_damping:
                log.warning("sweep stalled: relaxation weight below %g", config.min_damping)
                policy = accepted[0]
                break
            policy = _blend(grid, accepted[0], accepted[1], accepted[2], lam, config.fallback)
            continue
        accepted = (policy, u_new, mask, J)
        live = ~mask & ~policy.mask
        change = float(np.abs(u_new - policy.values)[live].max()) if live.any() else 0.0
        report.control_changes.append(change)
        report.saturated.append(n_sat)
        report.objectives.append(J if (len(report.objectives)) % config.objective_every == 0 else float("nan"))
        report.damping.append(lam)
        log.info("sweep %d: control change %.3e objective %.6g", it, change, J)
        if change < config.tol:
            report.converged = True
            break
        policy = _blend(grid, policy, u_new, mask, lam, config.fallback)
        if config.backtrack:
            lam = min(config.damping, 2.0 * lam)
    else:
        log.warning("sweep did not converge in %d iterations (last change %.3e)", config.max_iter, change)
    density = fp_forward(problem, policy, grid, keep=keep)
    value = hjb_backward(problem, policy, grid, keep=keep, boundary=config.boundary)
    return policy, density, value, report


def lqg_sweep_report(bundle):
    """Sweep report of the closed-form Riccati / covariance sweep."""
    changes = list(bundle.control_changes)
    return SweepReport(
        control_changes=changes,
        objectives=list(bundle.objectives[1:]),
        converged=bundle.converged,
        iterations=bundle.iterations,
    )
