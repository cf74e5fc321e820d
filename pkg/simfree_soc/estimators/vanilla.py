"""
Baseline gradient: pathwise derivative of the empirical objective, obtained by a reverse
sweep through the stored Euler-Maruyama trajectory. Memory grows linearly with the number of steps.
"""
from typing import Optional

import torch as th

from simfree_soc.common.policies import BasePolicy
from simfree_soc.common.sde import DEFAULT_DIVERGENCE_GUARD, TimeGrid, WienerPath, simulate_controlled
from simfree_soc.common.type_aliases import GradEstimate
from simfree_soc.common.utils import DTYPE, check_finite, weighted_moments, weighted_sum
from simfree_soc.estimators.base import accumulate_vjp, averaging_weights, walker_costs
from simfree_soc.problems.base import SocProblem


def vanilla_gradient(
    problem: SocProblem,
    policy: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    quadrature: Optional[th.Tensor] = None,
    deterministic: bool = False,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
) -> GradEstimate:
    """
    Differentiate ``sum_i omega_i [sum_k (1/2 |u_k|^2 + f_k) dt_k + g(x_K)]`` through the
    recursion ``x_{k+1} = x_k + (b(x_k) + sigma u(x_k)) dt_k + sigma dW_k``.

    The adjoint ``lambda_k = d loss / d x_k`` is propagated backward:

        c_k = omega u_k dt_k + dt_k sigma^T lambda_{k+1}              (cotangent of u_k)
        lambda_k = lambda_{k+1} + dt_k (d_x b)^T lambda_{k+1} + dt_k omega grad f + (d_x u)^T c_k

    :param problem: the control problem
    :param policy: the control being trained
    :param grid: time grid
    :param wiener: noise of the walkers
    :param quadrature: optional per-walker quadrature weights
    :param deterministic: use fixed-topology reductions over walkers
    :param strict: raise on diverged walkers instead of excluding them
    :param divergence_guard: norm beyond which a walker is diverged
    :return: the gradient estimate, with ``stored_step_records`` equal to the number of steps
    """
    batch = simulate_controlled(
        problem, policy, grid, wiener, store_states=True, divergence_guard=divergence_guard, strict=strict
    )
    costs = walker_costs(problem, batch)
    weights = averaging_weights(batch, quadrature)
    omega = weights.unsqueeze(-1)

    grad = th.zeros(policy.n_params, dtype=DTYPE)
    adjoint = omega * problem.terminal_grad(batch.terminal)
    times = grid.times.tolist()
    steps = grid.steps().tolist()
    for k in range(grid.n_steps - 1, -1, -1):
        t, dt = times[k], steps[k]
        x = batch.states[:, k]
        u, tape = policy.evaluate(t, x, keep_tape=True)
        sigma = problem.volatility(t)
        control_cotangent = omega * u * dt + dt * (adjoint @ sigma)
        through_control = accumulate_vjp(policy, tape, control_cotangent, grad, deterministic, input_grad=True)
        adjoint = (
            adjoint
            + dt * problem.drift_vjp(t, x, adjoint)
            + dt * omega * problem.running_grad(t, x)
            + through_control
        )
        check_finite(adjoint, "adjoint", step=k)

    loss = float(weighted_sum(costs, weights, deterministic))
    weight_mean, weight_var = weighted_moments(costs, weights, deterministic)
    return GradEstimate(
        grad=grad,
        loss=loss,
        n_walkers=batch.n_walkers,
        weight_mean=weight_mean,
        weight_var=weight_var,
        diverged_count=batch.diverged_count,
        stored_step_records=batch.stored_step_records,
    )
