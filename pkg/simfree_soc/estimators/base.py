"""
Pieces shared by the gradient estimators: per-walker costs, walker reductions,
divergence reporting and the plain Monte-Carlo objective.
"""
import warnings
from typing import Optional, Tuple

import torch as th

from simfree_soc.common.policies import BasePolicy, StepTape
from simfree_soc.common.sde import DEFAULT_DIVERGENCE_GUARD, TimeGrid, TrajectoryBatch, WienerPath, simulate_controlled
from simfree_soc.common.utils import DTYPE, check_finite, tree_sum, walker_weights, weighted_moments, weighted_sum
from simfree_soc.problems.base import SocProblem

ESTIMATORS = ("simfree", "vanilla", "offpolicy")


def walker_costs(problem: SocProblem, batch: TrajectoryBatch) -> th.Tensor:
    """
    On-policy cost of every walker, ``(Abar + Bbar) + g(X_T)``.

    :param problem: the control problem
    :param batch: simulated walkers
    :return: tensor of shape (n,)
    """
    terminal = problem.terminal_cost(batch.terminal)
    check_finite(terminal, "terminal cost")
    return (batch.acc_Abar + batch.acc_Bbar) + terminal


def averaging_weights(batch: TrajectoryBatch, quadrature: Optional[th.Tensor] = None) -> th.Tensor:
    """
    Walker weights of a batch: diverged walkers are excluded, with a warning.

    :param batch: simulated walkers
    :param quadrature: optional per-walker quadrature weights
    :return: weights summing to one
    """
    if batch.diverged_count > 0:
        warnings.warn(f"{batch.diverged_count} of {batch.n_walkers} walkers diverged and are excluded from the estimate")
    return walker_weights(batch.active, quadrature)


def accumulate_vjp(
    policy: BasePolicy,
    tape: StepTape,
    v: th.Tensor,
    grad: th.Tensor,
    deterministic: bool = False,
    input_grad: bool = False,
) -> Optional[th.Tensor]:
    """
    Add ``sum_i v_i^T d_theta u(t, x_i)`` to ``grad``.
    In deterministic mode the walker sum goes through the fixed-topology tree reduction.

    :param policy: the policy that recorded ``tape``
    :param tape: tape of one step
    :param v: per-walker cotangents (n, d)
    :param grad: flat buffer (|theta|,), updated in place
    :param deterministic: reduce over walkers with ``tree_sum``
    :param input_grad: also return ``v^T d_x u``
    :return: the input cotangent when ``input_grad``
    """
    if not deterministic:
        return policy.backward(tape, v, grad, input_grad=input_grad)
    per_walker = th.zeros((v.shape[0], policy.n_params), dtype=DTYPE)
    input_cotangent = policy.backward(tape, v, per_walker, per_walker=True, input_grad=input_grad)
    grad += tree_sum(per_walker, dim=0)
    return input_cotangent


def objective_samples(
    problem: SocProblem,
    policy: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
) -> Tuple[th.Tensor, TrajectoryBatch]:
    """
    Simulate and return the per-walker costs with the batch they come from.
    """
    batch = simulate_controlled(problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict)
    return walker_costs(problem, batch), batch


def objective_statistics(
    problem: SocProblem,
    policy: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    quadrature: Optional[th.Tensor] = None,
    deterministic: bool = False,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
) -> Tuple[float, float, int]:
    """
    Monte-Carlo estimate of the objective with its standard error.

    :return: mean, standard error and number of diverged walkers
    """
    costs, batch = objective_samples(problem, policy, grid, wiener, strict, divergence_guard)
    weights = averaging_weights(batch, quadrature)
    mean, var = weighted_moments(costs, weights, deterministic)
    n_active = batch.n_walkers - batch.diverged_count
    # Quadrature weights give an exact integral, there is no sampling error to report
    if quadrature is not None or n_active < 2:
        return mean, 0.0, batch.diverged_count
    std_err = (var / (n_active - 1)) ** 0.5
    return mean, std_err, batch.diverged_count


def objective_estimate(
    problem: SocProblem,
    policy: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    quadrature: Optional[th.Tensor] = None,
    deterministic: bool = False,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
) -> float:
    """
    Plain on-policy Monte-Carlo estimate of the objective,
    the walker average of ``Abar + Bbar + g(X_T)``.

    :param problem: the control problem
    :param policy: the control
    :param grid: time grid
    :param wiener: noise of the walkers
    :param quadrature: optional per-walker quadrature weights
    :param deterministic: use the fixed-topology tree reduction
    :param strict: raise on diverged walkers instead of excluding them
    :param divergence_guard: norm beyond which a walker is diverged
    :return: the estimate
    """
    costs, batch = objective_samples(problem, policy, grid, wiener, strict, divergence_guard)
    return float(weighted_sum(costs, averaging_weights(batch, quadrature), deterministic))
