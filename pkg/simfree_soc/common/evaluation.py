from typing import Optional, Tuple

import torch as th

from simfree_soc.common.policies import BasePolicy, FunctionPolicy
from simfree_soc.common.rng import WalkerStreams
from simfree_soc.common.sde import (
    StepRecord,
    TimeGrid,
    make_randomized_grid,
    sample_wiener_increments,
    simulate_controlled,
    uniform_grid,
)
from simfree_soc.common.type_aliases import ControlFn
from simfree_soc.common.utils import DTYPE, walker_weights, weighted_sum
from simfree_soc.estimators.base import objective_statistics
from simfree_soc.problems.base import SocProblem

# Number of trajectories used for the squared L2 control error
L2_ERROR_WALKERS = 256


def l2_error(
    problem: SocProblem,
    policy: BasePolicy,
    u_star: Optional[ControlFn] = None,
    n: int = L2_ERROR_WALKERS,
    grid: Optional[TimeGrid] = None,
    n_steps: int = 64,
    seed: int = 0,
    threads: int = 1,
) -> float:
    """
    Squared L2 distance to the optimal control along optimally controlled trajectories,

        mean_i sum_k |u(t_k, x_k) - u*(t_k, x_k)|^2 dt_k,   x ~ X^{u*}.

    The walkers read the evaluation streams of ``seed``, so the metric does not
    share noise with training and is identical at every call.

    :param problem: the control problem
    :param policy: the control being evaluated
    :param u_star: the optimal control, defaults to ``problem.optimal_control``
    :param n: number of trajectories
    :param grid: time grid, a uniform grid with ``n_steps`` steps when missing
    :param n_steps: number of steps of the default grid
    :param seed: seed of the evaluation streams
    :param threads: threads used to draw the noise
    :return: the error, averaged over the walkers that did not diverge
    """
    if u_star is None:
        u_star = problem.optimal_control
    if u_star is None:
        raise ValueError(f"Problem '{problem.name}' has no analytic optimal control")
    if grid is None:
        grid = uniform_grid(n_steps, problem.horizon)
    streams = WalkerStreams(seed).evaluation()
    wiener = sample_wiener_increments(grid, n, problem.dim, streams, threads=threads)
    optimal = FunctionPolicy(u_star, problem.dim, problem.horizon)
    error = th.zeros(n, dtype=DTYPE)

    def hook(record: StepRecord) -> None:
        nonlocal error
        u, _ = policy.evaluate(record.t, record.x)
        gap = u - record.u
        error = error + (gap * gap).sum(dim=-1) * record.dt

    batch = simulate_controlled(problem, optimal, grid, wiener, step_hook=hook)
    weights = walker_weights(batch.active)
    # Diverged walkers may carry a non-finite error; their weight is zero
    error = th.where(batch.active, error, th.zeros((), dtype=DTYPE))
    return float(weighted_sum(error, weights, deterministic=True))


def evaluate_policy(
    problem: SocProblem,
    policy: BasePolicy,
    n: int = 1000,
    n_steps: int = 64,
    seed: int = 0,
    grid_mode: str = "uniform",
    deterministic: bool = False,
    threads: int = 1,
) -> Tuple[float, float, int]:
    """
    Monte-Carlo estimate of the objective of ``policy`` on the evaluation streams.

    :param problem: the control problem
    :param policy: the control
    :param n: number of walkers
    :param n_steps: number of steps
    :param seed: seed of the evaluation streams
    :param grid_mode: ``uniform`` or ``randomized``
    :param deterministic: use the fixed-topology tree reduction
    :param threads: threads used to draw the noise
    :return: mean cost, its standard error and the number of diverged walkers
    """
    streams = WalkerStreams(seed).evaluation()
    grid = make_randomized_grid(n_steps, problem.horizon, streams.grid(), grid_mode)
    wiener = sample_wiener_increments(grid, n, problem.dim, streams, threads=threads)
    return objective_statistics(problem, policy, grid, wiener, deterministic=deterministic)
