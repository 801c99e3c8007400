"""The three named experiments: solve, simulate and write CSV tables.

Each runner appends every file it writes to ``files`` as soon as the file
exists, so a failing run still leaves a list of its partial artifacts, and
returns a summary dict for the manifest.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import io, lqg
from ._validation import ProblemError, is_pd
from .baseline import baseline_for, psi_policy
from .model import validate_problem
from .pde import GridSpec, solve_cosc
from .problems import ObstacleRegion, kalman_setting, memory_limited_lqg, obstacle_problem
from .sim import mc_objective, obstacle_stats, simulate_paths
from .sweep import SweepConfig, lqg_sweep_report, solve_ml_posc

log = logging.getLogger(__name__)


def _write(files, out, name, table):
    header, rows = table
    files.append(io.write_csv(Path(out) / name, header, rows))


def _require_valid(problem, obs=None):
    diag = validate_problem(problem, obs=obs)
    if not diag.ok:
        raise ProblemError("; ".join(diag.errors))


def run_lqg_memlim(cfg, out, seed, files):
    m = cfg["model"]
    problem = memory_limited_lqg(**m)
    _require_valid(problem)
    s = cfg["solver"]
    bundle = lqg.solve_po_riccati_sweep(problem, s["dt"], tol=s["tol"], max_iter=s["max_iter"], damping=s["damping"])
    _write(files, out, "psi_pi.csv", io.riccati_table(bundle))
    _write(files, out, "sweep_report.csv", io.sweep_table(lqg_sweep_report(bundle)))
    policies = {
        "memory-limited": lqg.lqg_policy(bundle),
        "psi-substituted": psi_policy(bundle),
        "full-state": lqg.cosc_policy(bundle),
    }
    moments = {k: lqg.closed_loop_moments(problem, p, s["dt"]) for k, p in policies.items()}
    _write(files, out, "moments.csv", io.moments_table(moments))
    sim = cfg["sim"]
    ensembles = {
        k: simulate_paths(problem, policies[k], sim["n_paths"], sim["dt"], seed,
                          record_every=sim["record_every"], label=k)
        for k in ("memory-limited", "psi-substituted")
    }
    _write(files, out, "paths.csv", io.ensemble_table(ensembles))
    rows = []
    summary = {}
    for k, pol in policies.items():
        J = lqg.lqg_objective(problem, pol, s["dt"])
        mc = mc_objective(ensembles[k]) if k in ensembles else None
        row = [k, J, mc.mean if mc else float("nan"), mc.se if mc else float("nan"),
               mc.n if mc else 0, moments[k].trace[-1]]
        rows.append(row)
        summary[k] = {"J": J, "trace_sigma_T": float(moments[k].trace[-1])}
    _write(files, out, "objectives.csv",
           (["policy", "J_deterministic", "J_mc", "J_mc_se", "n_paths", "trace_sigma_T"], rows))
    summary["sweep_converged"] = bundle.converged
    summary["sweep_iterations"] = bundle.iterations
    return summary


def run_obstacle(cfg, out, seed, files):
    m = cfg["model"]
    region = ObstacleRegion(m["t_start"], m["t_end"], m["band_lo"], m["band_hi"], m["weight"])
    problem = obstacle_problem(region, m["terminal_weight"], m["T"], m["var0"])
    _require_valid(problem)
    g = cfg["grid"]
    grid = GridSpec.build(problem, g["lo"], g["hi"], g["n"], g["control_bound"], scheme=g["scheme"])
    sw = cfg["sweep"]
    sweep_cfg = SweepConfig(
        max_iter=sw["max_iter"], tol=sw["tol"], damping=sw["damping"], mass_floor=sw["mass_floor"],
        boundary=sw["boundary"], update=sw["update"], control=sw["control"],
    )
    policy, density, _, report = solve_ml_posc(problem, grid, sweep_cfg)
    _write(files, out, "sweep_report.csv", io.sweep_table(report))
    _write(files, out, "policy_field.csv", io.policy_field_table(policy, cfg["export"]["policy_every"]))
    base = baseline_for(problem, cfg["baseline"]["dt"])
    # the full-state value does not depend on z, but the free gap around x = 0
    # needs a fine x spacing, so it gets its own lattice over the same box
    fs = cfg["full_state"]
    cosc_grid = GridSpec.build(problem, g["lo"], g["hi"], (fs["n_x"], fs["n_z"]), g["control_bound"],
                               scheme=g["scheme"])
    cosc = solve_cosc(problem, cosc_grid, boundary=sw["boundary"], saturate=True)
    sim = cfg["sim"]
    runs = {
        "memory-limited": (problem, policy),
        "local-lqg": (base.problem, base.policy),
        "full-state": (problem, cosc.policy),
    }
    ensembles = {
        k: simulate_paths(pb, pol, sim["n_paths"], sim["dt"], seed, record_every=sim["record_every"], label=k)
        for k, (pb, pol) in runs.items()
    }
    _write(files, out, "paths.csv", io.ensemble_table(ensembles))
    grid_J = {"memory-limited": density.objective, "local-lqg": float("nan"), "full-state": cosc.objective}
    rows, obst, summary = [], [], {}
    for k, ens in ensembles.items():
        mc = mc_objective(ens)
        st = obstacle_stats(ens, region)
        rows.append([k, mc.mean, mc.se, mc.n, grid_J[k], ens.clamped])
        obst.append([k, st.hit_fraction, st.mean_dwell])
        summary[k] = {"J_mc": mc.mean, "J_mc_se": mc.se, "hit_fraction": st.hit_fraction}
    _write(files, out, "objectives.csv",
           (["policy", "J_mc", "J_mc_se", "n_paths", "J_grid", "clamped"], rows))
    _write(files, out, "obstacle.csv", (["policy", "hit_fraction", "mean_dwell"], obst))
    summary.update(
        sweep_converged=report.converged,
        sweep_iterations=report.iterations,
        grid_dt=grid.dt,
        cosc_grid_dt=cosc_grid.dt,
        cosc_saturated=cosc.saturated,
    )
    return summary


def run_kalman(cfg, out, seed, files):
    m = dict(cfg["model"])
    state, obs, cost = kalman_setting(**m)
    if not is_pd(np.atleast_2d(cost.R)):
        raise ProblemError("R not positive definite")
    dt = cfg["solver"]["dt"]
    gains = lqg.optimal_memory_gains(state, obs, cost, dt)
    times, filt = lqg.filter_covariance(state, obs, cost.T, dt)
    a = gains.Sigma_x_given_z.reshape(len(times), -1)
    b = filt.reshape(len(times), -1)
    diff = np.abs(a - b).max(axis=1)
    rows = [[t, *a[k], *b[k], diff[k]] for k, t in enumerate(times)]
    d = a.shape[1]
    sfx = [""] if d == 1 else [f"_{i}" for i in range(d)]
    header = ["t"] + [f"sigma_x_given_z{s}" for s in sfx] + [f"sigma_filter{s}" for s in sfx] + ["abs_diff"]
    _write(files, out, "kalman_equivalence.csv", (header, rows))
    return {"sup_abs_diff": float(diff.max())}


RUNNERS = {
    "lqg-memlim": run_lqg_memlim,
    "nonlqg-obstacle": run_obstacle,
    "lqg-kalman-repro": run_kalman,
}
