"""Memory-limited partially observed stochastic control.

The controller reads a finite-dimensional noisy memory ``z`` instead of the
full observation history.  Control and memory dynamics are optimised jointly
on the extended state ``s = (x, z)``, either in closed form (linear dynamics,
quadratic costs) or with grid solvers for the coupled value / density
equations.
"""
from .baseline import local_lqg_baseline, psi_policy
from .estimators import LocalLQGController, MemoryLimitedGridController, MemoryLimitedLQG
from .lqg import (
    LinearPolicy,
    RiccatiBundle,
    closed_loop_moments,
    cosc_policy,
    filter_covariance,
    gain_K,
    kalman_filter,
    lqg_objective,
    lqg_policy,
    optimal_memory_gains,
    psi_substituted_policy,
    solve_po_riccati_sweep,
    solve_riccati,
)
from .model import (
    CostSpec,
    ExtendedProblem,
    MemoryModel,
    ObservationModel,
    StateModel,
    compose_extended,
    validate_problem,
)
from .pde import (
    GridSpec,
    PolicyGridField,
    conditional_stats,
    cosc_control_field,
    fp_forward,
    hjb_backward,
    optimal_control_field,
    solve_cosc,
)
from .problems import ObstacleRegion, kalman_setting, memory_limited_lqg, obstacle_problem
from .sim import mc_objective, obstacle_stats, simulate_paths
from .sweep import SweepConfig, SweepReport, solve_ml_posc

__version__ = "0.1.0"

__all__ = [
    "CostSpec",
    "ExtendedProblem",
    "GridSpec",
    "LinearPolicy",
    "LocalLQGController",
    "MemoryLimitedGridController",
    "MemoryLimitedLQG",
    "MemoryModel",
    "ObservationModel",
    "ObstacleRegion",
    "PolicyGridField",
    "RiccatiBundle",
    "StateModel",
    "SweepConfig",
    "SweepReport",
    "closed_loop_moments",
    "compose_extended",
    "conditional_stats",
    "cosc_control_field",
    "cosc_policy",
    "filter_covariance",
    "fp_forward",
    "gain_K",
    "hjb_backward",
    "kalman_filter",
    "kalman_setting",
    "local_lqg_baseline",
    "lqg_objective",
    "lqg_policy",
    "mc_objective",
    "memory_limited_lqg",
    "obstacle_problem",
    "obstacle_stats",
    "optimal_control_field",
    "optimal_memory_gains",
    "psi_policy",
    "psi_substituted_policy",
    "simulate_paths",
    "solve_cosc",
    "solve_ml_posc",
    "solve_po_riccati_sweep",
    "solve_riccati",
    "validate_problem",
]
