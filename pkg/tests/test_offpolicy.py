import math

import pytest
import torch as th

from simfree_soc.common.errors import NumericalError
from simfree_soc.common.policies import FunctionPolicy, MlpPolicy
from simfree_soc.common.rng import WalkerStreams
from simfree_soc.common.sde import WienerPath, sample_wiener_increments, uniform_grid
from simfree_soc.common.utils import DTYPE
from simfree_soc.estimators import GirsanovWeight, objective_estimate, offpolicy_objective
from simfree_soc.problems import InitialLaw, LinearOuSpec, linear_ou_problem, lqr_easy_spec, lqr_problem


def _ou_problem(gamma, dim):
    spec = LinearOuSpec.from_values(A=0.0, gamma=gamma, sigma0=1.0, dim=dim)
    return linear_ou_problem(spec, 1.0, InitialLaw.point_mass(0.0, dim))


def _noise(n_walkers, dim, n_steps=8, seed=0):
    grid = uniform_grid(n_steps, 1.0)
    return grid, sample_wiener_increments(grid, n_walkers, dim, WalkerStreams(seed))


def test_same_policy_has_unit_weights():
    problem = lqr_problem(lqr_easy_spec(3), riccati_steps=64)
    policy = MlpPolicy(3, net_arch=[8], num_freqs=4)
    grid, wiener = _noise(64, 3)
    result = offpolicy_objective(problem, policy, policy, grid, wiener)
    assert th.all(result.weights.log_m == 0.0)
    assert result.max_abs_log_weight == 0.0
    assert result.loss == pytest.approx(objective_estimate(problem, policy, grid, wiener), rel=1e-14)
    assert result.n_walkers == 64
    assert result.std_err > 0.0


def test_equal_controls_have_unit_weights():
    problem = _ou_problem(1.0, 2)
    grid, wiener = _noise(16, 2)
    u = FunctionPolicy.constant([0.5, -0.25], 2)
    v = FunctionPolicy.constant([0.5, -0.25], 2)
    result = offpolicy_objective(problem, u, v, grid, wiener)
    assert th.all(result.weights.log_m == 0.0)
    assert result.loss == pytest.approx(objective_estimate(problem, u, grid, wiener), rel=1e-14)


def test_girsanov_weights_have_unit_mean():
    problem = _ou_problem(0.0, 2)
    grid, wiener = _noise(20000, 2)
    u = FunctionPolicy.constant([0.5, 0.5], 2)
    v = FunctionPolicy.constant([-0.3, -0.3], 2)
    result = offpolicy_objective(problem, u, v, grid, wiener)
    weights = result.weights.weights()
    # Var M = exp(|u - v|^2 T) - 1
    std_err = math.sqrt(math.expm1(1.28) / 20000)
    assert abs(float(weights.mean()) - 1.0) < 4 * std_err


def test_offpolicy_matches_onpolicy_value():
    # J(c) = 1/2 |c|^2 + gamma . c for a constant control c and g(x) = gamma . x
    problem = _ou_problem([1.0, -1.0], 2)
    grid, wiener = _noise(20000, 2)
    u = FunctionPolicy.constant([0.5, 0.5], 2)
    result = offpolicy_objective(problem, u, FunctionPolicy.zero(2), grid, wiener)
    assert abs(result.loss - 0.25) < 4 * result.std_err
    assert result.std_err < 0.05


def test_large_weights_are_shifted():
    problem = _ou_problem(1.0, 1)
    grid = uniform_grid(1, 1.0)
    wiener = WienerPath(increments=th.full((2, 1, 1), -30.0, dtype=DTYPE), initial_noise=th.zeros(2, 1, dtype=DTYPE))
    # log M = -(40 - 0)(-30) - 40^2 / 2 = 400, and X_T = 40 - 30
    result = offpolicy_objective(problem, FunctionPolicy.zero(1), FunctionPolicy.constant(40.0, 1), grid, wiener)
    assert float(result.weights.log_m[0]) == pytest.approx(400.0)
    assert result.max_abs_log_weight == pytest.approx(400.0)
    assert result.loss == pytest.approx(10.0 * math.exp(400.0), rel=1e-12)
    assert result.std_err == 0.0


def test_overflow_is_reported():
    problem = _ou_problem(1.0, 1)
    grid = uniform_grid(1, 1.0)
    wiener = WienerPath(increments=th.full((2, 1, 1), -200.0, dtype=DTYPE), initial_noise=th.zeros(2, 1, dtype=DTYPE))
    with pytest.raises(NumericalError, match="overflows"):
        offpolicy_objective(problem, FunctionPolicy.zero(1), FunctionPolicy.constant(100.0, 1), grid, wiener)


def test_girsanov_weight_checks():
    with pytest.raises(NumericalError):
        GirsanovWeight(th.tensor([0.0, float("nan")], dtype=DTYPE))
    weight = GirsanovWeight(th.tensor([-1.0, 2.0], dtype=DTYPE))
    assert weight.max_abs == 2.0
