import math

import pytest
import torch as th
from scipy import stats

from simfree_soc.common.errors import DivergedWalkersError
from simfree_soc.common.policies import FunctionPolicy
from simfree_soc.common.rng import WalkerStreams
from simfree_soc.common.sde import (
    TimeGrid,
    WienerPath,
    euler_maruyama_step,
    make_randomized_grid,
    sample_wiener_increments,
    simulate_controlled,
    uniform_grid,
)
from simfree_soc.common.utils import DTYPE
from simfree_soc.problems import InitialLaw, follmer_problem, gaussian_potential, linear_ou_problem
from simfree_soc.problems.linear import LinearOuSpec


def test_single_step_grid():
    grid = make_randomized_grid(1, 1.0, WalkerStreams(0).grid())
    assert grid.times.tolist() == [0.0, 1.0]
    assert grid.steps().tolist() == [1.0]


def test_uniform_grid():
    grid = make_randomized_grid(4, 1.0, WalkerStreams(0).grid(), mode="uniform")
    assert grid.times.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert uniform_grid(4, 1.0).times.tolist() == grid.times.tolist()


@pytest.mark.parametrize("n_steps", [2, 7, 64])
@pytest.mark.parametrize("horizon", [0.5, 1.0, 3.0])
def test_randomized_grid_closure(n_steps, horizon):
    for iteration in range(5):
        grid = make_randomized_grid(n_steps, horizon, WalkerStreams(1).for_iteration(iteration).grid())
        assert grid.n_steps == n_steps
        assert grid.times[0] == 0.0
        assert grid.times[-1] == horizon
        assert grid.is_strict


def test_randomized_grid_order_statistics():
    # The j-th interior point is Beta(j, K - j) distributed
    n_steps, j = 10, 3
    streams = WalkerStreams(123)
    points = [
        float(make_randomized_grid(n_steps, 1.0, streams.for_iteration(i).grid()).times[j]) for i in range(2000)
    ]
    _, p_value = stats.kstest(points, stats.beta(j, n_steps - j).cdf)
    assert p_value > 0.01


@pytest.mark.parametrize("args", [(0, 1.0), (4, 0.0), (4, -1.0), (2.5, 1.0)])
def test_grid_invalid_arguments(args):
    with pytest.raises(ValueError):
        make_randomized_grid(*args, WalkerStreams(0).grid())
    with pytest.raises(ValueError):
        make_randomized_grid(4, 1.0, WalkerStreams(0).grid(), mode="geometric")


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(th.tensor([0.0], dtype=DTYPE))
    with pytest.raises(ValueError):
        TimeGrid(th.tensor([0.1, 1.0], dtype=DTYPE))
    with pytest.raises(ValueError):
        TimeGrid(th.tensor([0.0, 0.6, 0.4, 1.0], dtype=DTYPE))


def test_zero_step_gives_zero_increment():
    grid = TimeGrid(th.tensor([0.0, 0.5, 0.5, 1.0], dtype=DTYPE))
    assert not grid.is_strict
    wiener = sample_wiener_increments(grid, 3, 2, WalkerStreams(0))
    assert th.all(wiener.increments[:, 1] == 0.0)


def test_wiener_walker_order_and_threads():
    grid = uniform_grid(8, 1.0)
    streams = WalkerStreams(42).for_iteration(3)
    reference = sample_wiener_increments(grid, 5, 3, streams)
    reversed_order = sample_wiener_increments(grid, 5, 3, streams, walker_order=[4, 3, 2, 1, 0])
    threaded = sample_wiener_increments(grid, 5, 3, streams, threads=3)
    assert th.equal(reference.increments, reversed_order.increments)
    assert th.equal(reference.initial_noise, reversed_order.initial_noise)
    assert th.equal(reference.increments, threaded.increments)
    # A walker's draws do not depend on the batch size
    larger = sample_wiener_increments(grid, 9, 3, streams)
    assert th.equal(reference.increments, larger.increments[:5])
    with pytest.raises(ValueError):
        sample_wiener_increments(grid, 3, 3, streams, walker_order=[0, 0, 1])


def test_wiener_streams_differ():
    grid = uniform_grid(4, 1.0)
    first = sample_wiener_increments(grid, 4, 2, WalkerStreams(0).for_iteration(0))
    second = sample_wiener_increments(grid, 4, 2, WalkerStreams(0).for_iteration(1))
    evaluation = sample_wiener_increments(grid, 4, 2, WalkerStreams(0).evaluation())
    assert not th.equal(first.increments, second.increments)
    assert not th.equal(first.increments, evaluation.increments)


def test_wiener_increment_variance():
    grid = TimeGrid(th.tensor([0.0, 0.25], dtype=DTYPE))
    wiener = sample_wiener_increments(grid, 20000, 1, WalkerStreams(7))
    variance = float(wiener.increments.var())
    # 99.9% chi-square interval of the sample variance
    assert 0.2425 < variance < 0.2575


def test_euler_maruyama_step():
    x = th.tensor([1.0, -2.0], dtype=DTYPE)
    zero = th.zeros(2, dtype=DTYPE)
    assert th.equal(euler_maruyama_step(x, 0.0, 0.1, zero, th.eye(2, dtype=DTYPE), zero), x)

    out = euler_maruyama_step(
        th.tensor([1.0], dtype=DTYPE),
        0.0,
        0.1,
        th.tensor([0.5], dtype=DTYPE),
        th.eye(1, dtype=DTYPE),
        th.tensor([0.2], dtype=DTYPE),
    )
    assert float(out) == pytest.approx(1.25, abs=1e-15)

    sigma = th.diag(th.tensor([2.0, 3.0], dtype=DTYPE))
    out = euler_maruyama_step(x, 0.0, 0.1, zero, sigma, th.tensor([0.1, 0.1], dtype=DTYPE))
    assert th.allclose(out, x + th.tensor([0.2, 0.3], dtype=DTYPE), atol=1e-15)

    with pytest.raises(ValueError):
        euler_maruyama_step(x, 0.0, 0.0, zero, th.eye(2, dtype=DTYPE), zero)


def _brownian_problem(dim: int, x0: float = 0.0):
    spec = LinearOuSpec.from_values(A=0.0, gamma=0.0, sigma0=1.0, dim=dim)
    return linear_ou_problem(spec, 1.0, InitialLaw.point_mass(x0, dim))


def test_zero_control_accumulators():
    problem = follmer_problem(gaussian_potential, dim=3)
    grid = uniform_grid(8, 1.0)
    wiener = sample_wiener_increments(grid, 6, 3, WalkerStreams(0))
    batch = simulate_controlled(problem, FunctionPolicy.zero(3), grid, wiener)
    for acc in (batch.acc_A, batch.acc_Abar, batch.acc_Bbar, batch.acc_C):
        assert th.all(acc == 0.0)
    assert batch.stored_step_records == 0
    assert batch.states is None


def test_constant_control_accumulators():
    problem = _brownian_problem(2)
    c = th.tensor([0.5, -1.5], dtype=DTYPE)
    grid = make_randomized_grid(16, 1.0, WalkerStreams(3).grid())
    wiener = sample_wiener_increments(grid, 4, 2, WalkerStreams(3))
    batch = simulate_controlled(problem, FunctionPolicy.constant(c, 2), grid, wiener)
    expected_a = 0.5 * float(c @ c) * 1.0
    expected_c = wiener.increments.sum(dim=1) @ c
    assert th.allclose(batch.acc_A, th.full((4,), expected_a, dtype=DTYPE), rtol=1e-12)
    assert th.equal(batch.acc_A, batch.acc_Abar)
    assert th.allclose(batch.acc_C, expected_c, rtol=1e-12, atol=1e-14)


def test_single_step_identity():
    problem = _brownian_problem(2)
    grid = uniform_grid(1, 1.0)
    wiener = sample_wiener_increments(grid, 5, 2, WalkerStreams(9))
    batch = simulate_controlled(problem, FunctionPolicy.zero(2), grid, wiener, store_states=True)
    assert th.equal(batch.terminal, wiener.increments[:, 0])
    assert batch.states.shape == (5, 2, 2)
    assert batch.stored_step_records == 1


def test_shape_checks():
    problem = _brownian_problem(2)
    grid = uniform_grid(4, 1.0)
    wiener = sample_wiener_increments(grid, 3, 2, WalkerStreams(0))
    with pytest.raises(ValueError):
        simulate_controlled(problem, FunctionPolicy.zero(2), uniform_grid(5, 1.0), wiener)
    with pytest.raises(ValueError):
        simulate_controlled(_brownian_problem(3), FunctionPolicy.zero(3), grid, wiener)
    with pytest.raises(ValueError):
        WienerPath(increments=th.zeros(3, 4, 2, dtype=DTYPE), initial_noise=th.zeros(3, 1, dtype=DTYPE))


def test_divergence_guard():
    problem = _brownian_problem(1)
    grid = uniform_grid(4, 1.0)
    wiener = sample_wiener_increments(grid, 8, 1, WalkerStreams(0))
    # Walkers 0 and 1 are pushed far away
    push = th.zeros(8, 1, dtype=DTYPE)
    push[:2] = 1e8

    def control(t, x):
        return push.clone()

    policy = FunctionPolicy(control, 1)
    batch = simulate_controlled(problem, policy, grid, wiener, divergence_guard=1e6)
    assert batch.diverged_count == 2
    assert batch.active.tolist() == [False, False] + [True] * 6
    assert th.all(th.isfinite(batch.terminal))
    # Frozen after the step that crossed the guard
    assert float(batch.acc_A[0]) == pytest.approx(0.5 * 1e16 * 0.25)

    with pytest.raises(DivergedWalkersError) as excinfo:
        simulate_controlled(problem, policy, grid, wiener, divergence_guard=1e6, strict=True)
    assert excinfo.value.step == 0


def test_uncontrolled_ou_mean():
    # E[X_T] = e^{aT} E[X_0] for dX = a X dt + dW, up to the O(dt) weak error
    a, horizon, n = -0.7, 1.0, 4000
    spec = LinearOuSpec.from_values(A=a, gamma=0.0, sigma0=1.0, dim=2)
    problem = linear_ou_problem(spec, horizon, InitialLaw.gaussian(0.8, 0.25, 2))
    grid = uniform_grid(128, horizon)
    wiener = sample_wiener_increments(grid, n, 2, WalkerStreams(11))
    batch = simulate_controlled(problem, FunctionPolicy.zero(2), grid, wiener)
    mean = batch.terminal.mean(dim=0)
    std_err = batch.terminal.std(dim=0) / n**0.5
    expected = math.exp(a * horizon) * 0.8
    assert th.all((mean - expected).abs() < 3 * std_err)
