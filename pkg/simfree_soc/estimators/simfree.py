"""
Simulation-free on-policy gradient of the control objective.

With ``w_i = Abar_i + Bbar_i + g(X^i_T)``, the gradient is estimated as

    sum_i omega_i [ sum_k dt_k u_k . d_theta u_k  +  w_i sum_k dW_k . d_theta u_k ]

from a single forward simulation; the states are never differentiated.
"""
from typing import Optional

import torch as th

from simfree_soc.common.policies import BasePolicy
from simfree_soc.common.sde import DEFAULT_DIVERGENCE_GUARD, StepRecord, TimeGrid, WienerPath, simulate_controlled
from simfree_soc.common.type_aliases import GradEstimate
from simfree_soc.common.utils import DTYPE, weighted_moments, weighted_sum
from simfree_soc.estimators.base import accumulate_vjp, averaging_weights, walker_costs
from simfree_soc.problems.base import SocProblem

PATHS = ("direct", "stopgrad")
ACCUMULATIONS = ("auto", "per_walker", "replay")
# Largest number of float64 entries of the two per-walker buffers picked by ``auto``
PER_WALKER_LIMIT = 2**24


def resolve_accumulation(accumulation: str, n_walkers: int, n_params: int) -> str:
    """
    Choose between per-walker buffers (one pass, O(n |theta|) memory)
    and replay (two passes, O(|theta|) memory).
    """
    if accumulation not in ACCUMULATIONS:
        raise ValueError(f"Unknown accumulation '{accumulation}', expected one of {ACCUMULATIONS}")
    if accumulation != "auto":
        return accumulation
    return "per_walker" if 2 * n_walkers * n_params <= PER_WALKER_LIMIT else "replay"


def simfree_gradient(
    problem: SocProblem,
    policy: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    path: str = "direct",
    accumulation: str = "auto",
    quadrature: Optional[th.Tensor] = None,
    deterministic: bool = False,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
) -> GradEstimate:
    """
    Simulation-free gradient estimate.

    :param problem: the control problem
    :param policy: the control being trained
    :param grid: time grid
    :param wiener: noise of the walkers
    :param path: ``direct`` (hand-written parameter VJPs) or ``stopgrad``
        (parameter VJPs of the surrogate loss ``A + (Abar + Bbar + g) C`` with the bracket held constant)
    :param accumulation: ``per_walker``, ``replay`` or ``auto`` (direct path only)
    :param quadrature: optional per-walker quadrature weights replacing the uniform average
    :param deterministic: use fixed-topology reductions over walkers
    :param strict: raise on diverged walkers instead of excluding them
    :param divergence_guard: norm beyond which a walker is diverged
    :return: the gradient estimate
    """
    if path not in PATHS:
        raise ValueError(f"Unknown simfree path '{path}', expected one of {PATHS}")
    if path == "stopgrad":
        return _stopgrad_gradient(problem, policy, grid, wiener, quadrature, deterministic, strict, divergence_guard)
    mode = resolve_accumulation(accumulation, wiener.n_walkers, policy.n_params)
    if mode == "per_walker":
        return _per_walker_gradient(problem, policy, grid, wiener, quadrature, deterministic, strict, divergence_guard)
    return _replay_gradient(problem, policy, grid, wiener, quadrature, deterministic, strict, divergence_guard)


def _finish(
    grad: th.Tensor,
    costs: th.Tensor,
    weights: th.Tensor,
    n_walkers: int,
    diverged: int,
    deterministic: bool,
    surrogate_loss: Optional[float] = None,
) -> GradEstimate:
    loss = float(weighted_sum(costs, weights, deterministic))
    weight_mean, weight_var = weighted_moments(costs, weights, deterministic)
    return GradEstimate(
        grad=grad,
        loss=loss,
        n_walkers=n_walkers,
        weight_mean=weight_mean,
        weight_var=weight_var,
        diverged_count=diverged,
        stored_step_records=0,
        surrogate_loss=surrogate_loss,
    )


def _per_walker_gradient(problem, policy, grid, wiener, quadrature, deterministic, strict, divergence_guard) -> GradEstimate:
    n, n_params = wiener.n_walkers, policy.n_params
    energy_grad = th.zeros((n, n_params), dtype=DTYPE)
    noise_grad = th.zeros((n, n_params), dtype=DTYPE)

    def hook(record: StepRecord) -> None:
        policy.backward(record.tape, record.u * record.dt, energy_grad, per_walker=True)
        policy.backward(record.tape, record.dw, noise_grad, per_walker=True)

    batch = simulate_controlled(
        problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict, step_hook=hook, keep_tape=True
    )
    costs = walker_costs(problem, batch)
    weights = averaging_weights(batch, quadrature)
    grad = weighted_sum(energy_grad + costs.unsqueeze(-1) * noise_grad, weights, deterministic)
    return _finish(grad, costs, weights, batch.n_walkers, batch.diverged_count, deterministic)


def _replay_gradient(problem, policy, grid, wiener, quadrature, deterministic, strict, divergence_guard) -> GradEstimate:
    # First pass: the per-walker weights need g(X_T) before any parameter VJP is taken
    batch = simulate_controlled(problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict)
    costs = walker_costs(problem, batch)
    weights = averaging_weights(batch, quadrature)
    grad = th.zeros(policy.n_params, dtype=DTYPE)
    scale = weights.unsqueeze(-1)
    bracket = costs.unsqueeze(-1)

    def hook(record: StepRecord) -> None:
        cotangent = scale * (record.u * record.dt + bracket * record.dw)
        accumulate_vjp(policy, record.tape, cotangent, grad, deterministic)

    # Second pass over the same noise: identical trajectories
    simulate_controlled(
        problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict, step_hook=hook, keep_tape=True
    )
    return _finish(grad, costs, weights, batch.n_walkers, batch.diverged_count, deterministic)


def _stopgrad_gradient(problem, policy, grid, wiener, quadrature, deterministic, strict, divergence_guard) -> GradEstimate:
    # The surrogate is mean_i [A_i(theta) + w_i C_i(theta)] with w_i marked constant.
    # A first pass fixes w_i; the second differentiates the theta-marked A and C step by step.
    batch = simulate_controlled(problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict)
    costs = walker_costs(problem, batch)
    weights = averaging_weights(batch, quadrature)
    held = costs.detach()
    grad = th.zeros(policy.n_params, dtype=DTYPE)
    acc_A = th.zeros(wiener.n_walkers, dtype=DTYPE)
    acc_C = th.zeros(wiener.n_walkers, dtype=DTYPE)

    def hook(record: StepRecord) -> None:
        nonlocal acc_A, acc_C
        acc_A = acc_A + 0.5 * (record.u * record.u).sum(dim=-1) * record.dt
        acc_C = acc_C + (record.u * record.dw).sum(dim=-1)
        # d/du of 1/2 |u|^2 dt + w u.dW
        d_surrogate = record.u * record.dt + held.unsqueeze(-1) * record.dw
        accumulate_vjp(policy, record.tape, weights.unsqueeze(-1) * d_surrogate, grad, deterministic)

    simulate_controlled(
        problem, policy, grid, wiener, divergence_guard=divergence_guard, strict=strict, step_hook=hook, keep_tape=True
    )
    surrogate = weighted_sum(acc_A + held * acc_C, weights, deterministic)
    return _finish(grad, costs, weights, batch.n_walkers, batch.diverged_count, deterministic, float(surrogate))
