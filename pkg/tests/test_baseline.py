import numpy as np
import pytest

from mlposc import baseline, lqg
from mlposc._validation import ProblemError
from mlposc.problems import kalman_setting, obstacle_models, obstacle_problem

SEPARATED_J = 146.2017  # scalar unstable plant, T = 10, dt = 1e-3


@pytest.fixture(scope="module")
def kalman_parts():
    return kalman_setting()


def test_quadratic_weight_of_quadratic_form():
    W = np.array([[2.0, 0.5], [0.5, 1.0]])
    fn = lambda x: np.einsum("...i,ij,...j->...", x, W, x) + x[..., 0]
    np.testing.assert_allclose(baseline.quadratic_weight(fn, 2, nominal=[0.3, -1.0]), W, atol=1e-6)


def test_baseline_is_exact_on_lqg(kalman_parts):
    state, obs, cost = kalman_parts
    res = baseline.local_lqg_baseline(state, obs, cost, dt=1e-3)
    J_sep = baseline.separated_objective(state, obs, cost, dt=1e-3)
    J_pol = lqg.lqg_objective(res.problem, res.policy, 1e-3)
    assert J_sep == pytest.approx(SEPARATED_J, rel=1e-5)
    assert J_pol == pytest.approx(J_sep, rel=1e-3)
    assert res.policy.memory_only
    np.testing.assert_allclose(res.Q_local, 1.0)


def test_obstacle_expansion_drops_the_band():
    prob = obstacle_problem()
    res = baseline.baseline_for(prob, dt=1e-3)
    # x = 0 lies outside the band, so the expanded running weight vanishes
    np.testing.assert_array_equal(res.Q_local, 0.0)
    np.testing.assert_allclose(res.P_local, [[10.0]], rtol=1e-6)
    # the controller still reads the filter mean only
    assert res.policy.memory_only
    assert res.problem.meta.get("region") is None
    assert res.problem.running_state_cost(0.45, np.array([[1.0, 0.0]]))[0] == 1000.0


def test_baseline_needs_model_parts(memlim):
    with pytest.raises(ProblemError):
        baseline.baseline_for(memlim)


def test_separated_objective_rejects_non_quadratic_costs():
    state, obs, cost = obstacle_models()
    prob = obstacle_problem()
    with pytest.raises(ProblemError):
        baseline.separated_objective(state, obs, prob.meta["cost"])
    assert baseline.separated_objective(state, obs, cost) > 0


def test_psi_policy_matches_substituted_policy(memlim_bundle):
    a = baseline.psi_policy(memlim_bundle)
    b = lqg.psi_substituted_policy(memlim_bundle)
    np.testing.assert_array_equal(a.gain, b.gain)
    assert a.memory_only
