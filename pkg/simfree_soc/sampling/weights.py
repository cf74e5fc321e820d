"""
Importance weights of terminal samples of a controlled process started at 0.

For the Follmer problem (target ``e^{-U} / Z``)

    log M(u) = (d/2) log 2 pi - sum_k 1/2 |u_k|^2 dt_k - sum_k u_k . dW_k + 1/2 |X_T|^2 - U(X_T)

and for fine-tuning with reward ``r``

    log M_r(u) = - sum_k 1/2 |u_k|^2 dt_k - sum_k u_k . dW_k + r(X_T).

Both rewards equal ``-g(X_T)``, so the path part is shared.
"""
import math
import warnings
from typing import Any, Dict, Optional

import torch as th

from simfree_soc.common.policies import BasePolicy
from simfree_soc.common.rng import WalkerStreams
from simfree_soc.common.sde import (
    DEFAULT_DIVERGENCE_GUARD,
    TimeGrid,
    TrajectoryBatch,
    WienerPath,
    make_randomized_grid,
    sample_wiener_increments,
    simulate_controlled,
)
from simfree_soc.common.utils import check_finite
from simfree_soc.problems.base import SocProblem
from simfree_soc.problems.follmer import PotentialFn, half_square_norm
from simfree_soc.sampling.stats import WeightedSampleSet

LOG_2PI = math.log(2.0 * math.pi)


def follmer_log_prefactor(dim: int) -> float:
    """``log (2 pi)^{d/2}``."""
    return 0.5 * dim * LOG_2PI


def path_log_weights(batch: TrajectoryBatch, terminal_reward: th.Tensor) -> th.Tensor:
    """``-A - C + reward``, per walker."""
    return -batch.acc_A - batch.acc_C + terminal_reward


def _check_kind(problem: SocProblem, kind: str) -> None:
    if problem.kind != kind:
        raise ValueError(f"Expected a problem of kind '{kind}', got '{problem.kind}' ({problem.name})")


def _sample_set(batch: TrajectoryBatch, log_weights: th.Tensor, meta: Dict[str, Any]) -> WeightedSampleSet:
    check_finite(log_weights, "log weight")
    meta = dict(meta, diverged=batch.diverged_count)
    if batch.diverged_count > 0:
        warnings.warn(f"{batch.diverged_count} of {batch.n_walkers} walkers diverged and are dropped from the sample set")
        return WeightedSampleSet(batch.terminal[batch.active], log_weights[batch.active], meta)
    return WeightedSampleSet(batch.terminal, log_weights, meta)


def weighted_samples(
    problem: SocProblem,
    policy: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    log_prefactor: float = 0.0,
    reward: Optional[PotentialFn] = None,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
    meta: Optional[Dict[str, Any]] = None,
) -> WeightedSampleSet:
    """
    Simulate the walkers of ``wiener`` and weight their terminal states by
    ``log_prefactor + (-A - C + reward(X_T))``; the reward defaults to ``-g``.

    :param problem: Follmer or fine-tuning problem
    :param policy: the control
    :param grid: time grid
    :param wiener: noise of the walkers
    :param log_prefactor: constant added to every log weight
    :param reward: terminal reward; ``-problem.terminal_cost`` when missing
    :param strict: raise on diverged walkers instead of dropping them
    :param divergence_guard: norm beyond which a walker is diverged
    :param meta: metadata stored in the sample set
    :return: the weighted samples
    """
    batch = simulate_controlled(problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict)
    terminal_reward = reward(batch.terminal) if reward is not None else -problem.terminal_cost(batch.terminal)
    log_weights = path_log_weights(batch, terminal_reward)
    if log_prefactor != 0.0:
        log_weights = log_prefactor + log_weights
    return _sample_set(batch, log_weights, dict(meta or {}, problem=problem.name, n_steps=grid.n_steps))


def _draw(problem: SocProblem, n: int, n_steps: int, streams: WalkerStreams, grid_mode: str, threads: int):
    grid = make_randomized_grid(n_steps, problem.horizon, streams.grid(), grid_mode)
    return grid, sample_wiener_increments(grid, n, problem.dim, streams, threads=threads)


def follmer_sample(
    problem: SocProblem,
    policy: BasePolicy,
    n: int,
    n_steps: int,
    streams: WalkerStreams,
    potential: Optional[PotentialFn] = None,
    grid_mode: str = "uniform",
    threads: int = 1,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
    meta: Optional[Dict[str, Any]] = None,
) -> WeightedSampleSet:
    """
    Terminal samples of the controlled Follmer process with weights ``log M(u)``;
    ``log mean M`` estimates ``log Z`` whatever the control.

    :param problem: problem built by ``follmer_problem``
    :param policy: the control, possibly suboptimal
    :param n: number of walkers
    :param n_steps: number of time steps
    :param streams: random streams (the iteration index selects the draw)
    :param potential: ``U``; the weights use ``1/2 |x|^2 - U(x)`` instead of ``-g(x)`` when given
    :param grid_mode: ``uniform`` or ``randomized``
    :param threads: threads used to draw the noise
    :param strict: raise on diverged walkers instead of dropping them
    :param divergence_guard: norm beyond which a walker is diverged
    :param meta: metadata stored in the sample set
    :return: the weighted samples
    """
    _check_kind(problem, "follmer")
    reward = None
    if potential is not None:

        def reward(x: th.Tensor) -> th.Tensor:
            return half_square_norm(x) - potential(x)

    grid, wiener = _draw(problem, n, n_steps, streams, grid_mode, threads)
    return weighted_samples(
        problem,
        policy,
        grid,
        wiener,
        log_prefactor=follmer_log_prefactor(problem.dim),
        reward=reward,
        strict=strict,
        divergence_guard=divergence_guard,
        meta=dict(meta or {}, seed=streams.seed),
    )


def finetune_weights(
    problem: SocProblem,
    policy: BasePolicy,
    n: int,
    n_steps: int,
    streams: WalkerStreams,
    reward: Optional[PotentialFn] = None,
    grid_mode: str = "uniform",
    threads: int = 1,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
    meta: Optional[Dict[str, Any]] = None,
) -> WeightedSampleSet:
    """
    Terminal samples of the fine-tuned process with weights ``log M_r(u)``, without the
    ``(2 pi)^{d/2}`` prefactor; ``log mean M_r`` estimates ``log E[e^{r(Y_T)}]`` under the base process.

    :param problem: problem built by ``finetune_problem``
    :param policy: the control
    :param n: number of walkers
    :param n_steps: number of time steps
    :param streams: random streams
    :param reward: ``r``; ``-g`` is used when missing
    :param grid_mode: ``uniform`` or ``randomized``
    :param threads: threads used to draw the noise
    :param strict: raise on diverged walkers instead of dropping them
    :param divergence_guard: norm beyond which a walker is diverged
    :param meta: metadata stored in the sample set
    :return: the weighted samples
    """
    _check_kind(problem, "finetune")
    grid, wiener = _draw(problem, n, n_steps, streams, grid_mode, threads)
    return weighted_samples(
        problem,
        policy,
        grid,
        wiener,
        reward=reward,
        strict=strict,
        divergence_guard=divergence_guard,
        meta=dict(meta or {}, seed=streams.seed),
    )
