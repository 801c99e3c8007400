import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlposc import lqg
from mlposc.lqg import IntegrationError, LinearPolicy
from mlposc.model import CostSpec, MemoryModel
from mlposc.problems import kalman_setting, memory_limited_lqg
from mlposc._validation import ProblemError

from conftest import scalar_problem

ROOT2 = 1.0 + np.sqrt(2.0)

# frozen from the first verified run (dt = 1e-3, sweep tol 1e-10)
J_OPT = 188.60361316184833
J_PSI = 97702.0083205114
TRACE_OPT_T = 38.88857492287218
TRACE_PSI_T = 166913.57617499068


def zero_policy(problem, dt):
    n = int(round(problem.T / dt)) + 1
    times = np.linspace(0, problem.T, n)
    return LinearPolicy(times, np.zeros((n, problem.d_u, problem.d_s)), np.zeros((n, problem.d_u)), problem.d_x)


# Riccati ------------------------------------------------------------------

def test_riccati_zero_cost_is_zero():
    Psi = lqg.solve_riccati(scalar_problem(Q=0.0, P=0.0), 1e-2)
    assert np.all(Psi == 0.0)


def test_riccati_stationary_root():
    Psi = lqg.solve_riccati(scalar_problem(P=ROOT2, T=2.0), 1e-3)
    np.testing.assert_allclose(Psi[:, 0, 0], ROOT2, atol=1e-12)


def test_riccati_memory_blocks_vanish(memlim_bundle):
    Psi = memlim_bundle.Psi
    assert np.abs(Psi[:, 0, 1]).max() <= 1e-8
    assert np.abs(Psi[:, 1, 0]).max() <= 1e-8
    assert np.abs(Psi[:, 1, 1]).max() <= 1e-8


def test_riccati_converges_to_stationary_root_backward(memlim_bundle):
    # far from T the curvature approaches the stabilising root from P = 0
    assert abs(memlim_bundle.Psi[0, 0, 0] - ROOT2) < 1e-8


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-1, 1), q=st.floats(0, 2), r=st.floats(0.2, 3), pT=st.floats(0, 3))
def test_riccati_symmetric_psd_and_anchored(a, q, r, pT):
    p = scalar_problem(A=a, Q=q, R=r, P=pT, T=1.0)
    Psi = lqg.solve_riccati(p, 1e-2)
    np.testing.assert_array_equal(Psi, np.swapaxes(Psi, 1, 2))
    np.testing.assert_array_equal(Psi[-1], p.P)
    assert np.linalg.eigvalsh(Psi).min() >= -1e-12


# inference gain ------------------------------------------------------------

def test_gain_uncorrelated():
    np.testing.assert_allclose(lqg.gain_K(np.diag([2.0, 3.0]), 1), [[0, 0], [0, 1]])


def test_gain_perfect_correlation():
    np.testing.assert_allclose(lqg.gain_K(np.array([[1.0, 0.5], [0.5, 0.5]]), 1), [[0, 1], [0, 1]], atol=1e-9)


def test_gain_worked_value():
    np.testing.assert_allclose(lqg.gain_K(np.array([[2.0, 1.0], [1.0, 1.0]]), 1), [[0, 1], [0, 1]], atol=1e-9)


def test_gain_singular_memory_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        lqg.gain_K(np.array([[1.0, 0.0], [0.0, -1e-10]]), 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_gain_is_conditional_mean_map(entries):
    # K s_hat is E[s_hat | z] for a Gaussian: the residual x - (K s)_x is uncorrelated with z
    L = np.array(entries).reshape(3, 3) + 3 * np.eye(3)
    Sigma = L @ L.T
    K = lqg.gain_K(Sigma, 1)
    assert np.all(K[:, 0] == 0) and np.allclose(K[1:, 1:], np.eye(2))
    R = np.eye(3) - K
    np.testing.assert_allclose((R @ Sigma)[0, 1:], 0.0, atol=1e-8 * np.abs(Sigma).max())


def test_estimation_coupling_block_formula():
    c = 0.7
    Pi = np.diag([1.0, 0.0])
    K = np.array([[0.0, c], [0.0, 1.0]])
    Qc = lqg.estimation_coupling(Pi, K, np.eye(2))
    np.testing.assert_allclose(Qc, [[1, -c], [-c, c * c]])


# partially observable sweep -------------------------------------------------

def test_full_observation_reduces_to_riccati(memlim):
    b = lqg.solve_po_riccati_sweep(memlim, 1e-3, tol=1e-10, full_observation=True)
    assert np.abs(b.Pi - b.Psi).max() <= 1e-10


def test_sweep_anchors_and_symmetry(memlim_bundle, memlim):
    b = memlim_bundle
    assert b.converged and b.control_changes[-1] < 1e-10
    np.testing.assert_array_equal(b.Pi[-1], memlim.P)
    np.testing.assert_array_equal(b.Psi[-1], memlim.P)
    np.testing.assert_array_equal(b.Sigma[0], memlim.cov0)
    for M in (b.Pi, b.Psi, b.Sigma):
        np.testing.assert_array_equal(M, np.swapaxes(M, 1, 2))
    assert np.linalg.eigvalsh(b.Sigma).min() > -1e-10
    assert np.all(b.K[:, :, 0] == 0) and np.allclose(b.K[:, 1, 1], 1.0)


def test_curvature_ordering(memlim_bundle):
    b = memlim_bundle
    Pi, Psi = b.Pi[:-1], b.Psi[:-1]
    assert np.all(Pi[:, 0, 0] >= Psi[:, 0, 0] - 1e-12)
    assert np.all(Pi[:, 1, 1] >= -1e-12)
    assert np.all(Pi[:, 0, 1] <= 1e-12)
    assert (Pi[:, 0, 0] - Psi[:, 0, 0]).max() > 0.1
    assert Pi[:, 1, 1].max() > 0.1 and Pi[:, 0, 1].min() < -0.1


def test_quadratic_value_gives_objective(memlim_bundle, memlim):
    b = memlim_bundle
    m, S = memlim.mean0, memlim.cov0
    J = np.trace(b.Pi[0] @ S) + m @ b.Pi[0] @ m + b.alpha[0] @ m + b.beta[0]
    assert J == pytest.approx(J_OPT, rel=1e-9)


def test_sweep_max_iter_reported(memlim):
    b = lqg.solve_po_riccati_sweep(memlim, 1e-2, tol=1e-14, max_iter=2)
    assert not b.converged and b.iterations == 2 and len(b.control_changes) == 2


def test_sweep_rejects_bad_damping(memlim):
    with pytest.raises(ProblemError):
        lqg.solve_po_riccati_sweep(memlim, 1e-2, damping=0.0)


def test_damped_sweep_reaches_same_fixed_point():
    p = scalar_problem(T=2.0)
    a = lqg.solve_po_riccati_sweep(p, 1e-2, tol=1e-11)
    b = lqg.solve_po_riccati_sweep(p, 1e-2, tol=1e-11, damping=0.5, max_iter=500)
    assert b.converged
    np.testing.assert_allclose(b.Pi, a.Pi, atol=1e-8)


# policies -------------------------------------------------------------------

def test_zero_cost_policy_is_zero():
    b = lqg.solve_po_riccati_sweep(scalar_problem(Q=0.0, P=0.0), 1e-2)
    pol = lqg.lqg_policy(b)
    assert np.all(pol.gain == 0) and np.all(pol.offset == 0)
    assert np.all(lqg.psi_substituted_policy(b).gain == 0)


def test_identity_gain_gives_full_state_policy(memlim):
    b = lqg.solve_po_riccati_sweep(memlim, 1e-2, full_observation=True)
    b = type(b)(**{**b.__dict__, "K": np.broadcast_to(np.eye(2), b.K.shape).copy()})
    u, c = lqg.lqg_policy(b), lqg.cosc_policy(b)
    np.testing.assert_allclose(u.gain, c.gain, atol=1e-12)
    np.testing.assert_allclose(u.offset, 0.0, atol=1e-12)


def test_memory_limited_policy_reads_memory_only(memlim_bundle):
    u = lqg.lqg_policy(memlim_bundle)
    assert u.memory_only
    S = np.array([[5.0, 0.3], [-2.0, 0.3]])
    np.testing.assert_array_equal(u(1.0, S)[0], u(1.0, S)[1])
    assert lqg.psi_substituted_policy(memlim_bundle).memory_only
    assert not lqg.cosc_policy(memlim_bundle).memory_only


def test_policy_at_origin_time(memlim_bundle):
    # mu = 0, so u*(0, z=1) = -(R^-1 B' Pi K)_{:, z}
    b = memlim_bundle
    u = lqg.lqg_policy(b)(0.0, np.array([[0.0, 1.0]]))[0]
    np.testing.assert_allclose(u, -(b.Pi[0] @ b.K[0])[:, 1])


# moments and objective ----------------------------------------------------

def test_moments_pure_diffusion():
    p = memory_limited_lqg(A=0.0, H=0.0, T=2.0)
    mom = lqg.closed_loop_moments(p, zero_policy(p, 1e-2), 1e-2)
    D = p.sigma_at(0.0) @ p.sigma_at(0.0).T
    np.testing.assert_allclose(mom.Sigma, p.cov0 + D * mom.times[:, None, None], atol=1e-12)


def test_moments_under_optimal_policy_match_bundle(memlim, memlim_bundle):
    mom = lqg.closed_loop_moments(memlim, lqg.lqg_policy(memlim_bundle), 1e-3)
    np.testing.assert_allclose(mom.Sigma, memlim_bundle.Sigma, atol=1e-10)
    np.testing.assert_allclose(mom.mu, memlim_bundle.mu, atol=1e-12)


def test_zero_weights_zero_objective():
    p = scalar_problem(Q=0.0, P=0.0, M=1.0)
    assert lqg.lqg_objective(p, zero_policy(p, 1e-2), 1e-2) == 0.0


def test_pure_terminal_cost_frozen_dynamics():
    p = memory_limited_lqg(A=0.0, sigma=0.0, kappa=0.0, Q=0.0, P=3.0, T=1.0, x_mean0=0.5, x_var0=2.0)
    J = lqg.lqg_objective(p, zero_policy(p, 1e-2), 1e-2)
    assert J == pytest.approx(3.0 * (2.0 + 0.25), rel=1e-12)


def test_objective_via_value_matches_moments(memlim, memlim_bundle):
    pol = lqg.lqg_policy(memlim_bundle)
    W, a, b = lqg.policy_value(memlim, pol, 1e-3)
    J = lqg._objective_from_value(memlim, W, a, b)
    assert J == pytest.approx(lqg.lqg_objective(memlim, pol, 1e-3), rel=1e-10)


def test_objective_regression_values(memlim, memlim_bundle):
    u, up = lqg.lqg_policy(memlim_bundle), lqg.psi_substituted_policy(memlim_bundle)
    assert lqg.lqg_objective(memlim, u, 1e-3) == pytest.approx(J_OPT, rel=1e-9)
    assert lqg.lqg_objective(memlim, up, 1e-3) == pytest.approx(J_PSI, rel=1e-9)
    assert lqg.closed_loop_moments(memlim, u, 1e-3).trace[-1] == pytest.approx(TRACE_OPT_T, rel=1e-9)
    assert lqg.closed_loop_moments(memlim, up, 1e-3).trace[-1] == pytest.approx(TRACE_PSI_T, rel=1e-9)


def test_blowup_reported_with_time():
    p = scalar_problem(T=10.0)
    pol = zero_policy(p, 1e-2)
    pol = LinearPolicy(pol.times, np.full_like(pol.gain, 500.0), pol.offset, 1)
    mom = lqg.closed_loop_moments(p, pol, 1e-2)
    assert mom.blowup_time is not None and 0 < mom.blowup_time < 10
    assert lqg.lqg_objective(p, pol, 1e-2) == np.inf
    with pytest.raises(IntegrationError, match="blew up at t="):
        lqg.closed_loop_moments(p, pol, 1e-2, raise_on_blowup=True)


# filter and optimal memory --------------------------------------------------

def test_filter_without_observation_is_lyapunov():
    # no information: S' = sigma^2 + 2 A S, i.e. S = 1 - 0.8 exp(-t) for A = -1/2, S0 = 0.2
    state, obs, cost = kalman_setting(H=0.0, A=-0.5, T=2.0, var0=0.2)
    times, S = lqg.filter_covariance(state, obs, cost.T, 1e-3)
    np.testing.assert_allclose(S[:, 0, 0], 1.0 - 0.8 * np.exp(-times), atol=1e-12)


def test_filter_stationary_covariance():
    state, obs, cost = kalman_setting(T=20.0)
    _, S = lqg.filter_covariance(state, obs, cost.T, 1e-3)
    assert S[-1, 0, 0] == pytest.approx(ROOT2, abs=1e-10)


def test_filter_first_step():
    state, obs, _ = kalman_setting(var0=0.5)
    dt = 1e-4
    _, S = lqg.filter_covariance(state, obs, 10 * dt, dt)
    s0 = 0.5
    first = s0 + (1 + 2 * s0 - s0 * s0) * dt
    assert abs(S[1, 0, 0] - first) < 10 * dt * dt


def test_kalman_mean_tracks_state(rng):
    # simulate the plant with u = 0 and check the filter error variance against its covariance
    state, obs, _ = kalman_setting(A=-1.0)
    dt, n, paths = 1e-3, 2000, 400
    x = rng.standard_normal(paths)
    dy = np.empty((paths, n, 1))
    for k in range(n):
        dy[:, k, 0] = x * dt + np.sqrt(dt) * rng.standard_normal(paths)
        x = x - x * dt + np.sqrt(dt) * rng.standard_normal(paths)
    fs = lqg.kalman_filter(state, obs, dy, dt)
    err = x - fs.mean[:, -1, 0]
    assert abs(err.var() / fs.cov[-1, 0, 0] - 1) < 0.25


def test_kalman_singular_noise_rejected():
    state, obs, _ = kalman_setting(gamma=0.0)
    with pytest.raises(ProblemError, match="singular"):
        lqg.filter_covariance(state, obs, 1.0, 1e-2)


def test_memory_gains_match_filter():
    state, obs, cost = kalman_setting()
    g = lqg.optimal_memory_gains(state, obs, cost, 1e-3)
    _, S = lqg.filter_covariance(state, obs, cost.T, 1e-3)
    assert np.abs(g.Sigma_x_given_z - S).max() <= 1e-8
    assert g.kappa[-1, 0, 0] == pytest.approx(ROOT2, abs=1e-8)
    np.testing.assert_allclose(g.v_gain, g.u_gain + 1.0 - g.kappa, atol=1e-14)


def test_memory_gains_without_observation():
    state, obs, cost = kalman_setting(H=0.0)
    g = lqg.optimal_memory_gains(state, obs, cost, 1e-2)
    assert np.all(g.kappa == 0)


def test_memory_gains_setting_mismatch():
    state, obs, cost = kalman_setting()
    with pytest.raises(ProblemError, match="memory noise"):
        lqg.optimal_memory_gains(state, obs, cost, 1e-2, memory=MemoryModel(1.0, [0.0], [[1.0]], eta=0.5))
    with pytest.raises(ProblemError, match="memory control cost"):
        lqg.optimal_memory_gains(state, obs, CostSpec(1.0, 1.0, 0.0, 10.0, M=1.0), 1e-2,
                                 memory=MemoryModel(1.0, [0.0], [[1.0]]))


def test_non_lqg_rejected():
    from mlposc.problems import obstacle_problem
    with pytest.raises(ProblemError, match="closed-form"):
        lqg.solve_riccati(obstacle_problem(), 1e-2)
