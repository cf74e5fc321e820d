"""
Off-policy objective: the cost of a control ``u`` estimated from trajectories of another
control ``v``, reweighted by the Girsanov factor ``M(u, v)``.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch as th

from simfree_soc.common.errors import NumericalError
from simfree_soc.common.policies import BasePolicy
from simfree_soc.common.sde import DEFAULT_DIVERGENCE_GUARD, StepRecord, TimeGrid, WienerPath, simulate_controlled
from simfree_soc.common.utils import DTYPE, check_finite, weighted_sum
from simfree_soc.estimators.base import averaging_weights
from simfree_soc.problems.base import SocProblem


@dataclass(frozen=True, eq=False)
class GirsanovWeight:
    """
    Per-walker ``log M(u, v) = -sum_k (v_k - u_k) . dW_k - 1/2 sum_k |v_k - u_k|^2 dt_k``.

    :param log_m: tensor of shape (n,)
    """

    log_m: th.Tensor

    def __post_init__(self) -> None:
        check_finite(self.log_m, "log Girsanov weight")

    @property
    def max_abs(self) -> float:
        return float(self.log_m.abs().max())

    def weights(self) -> th.Tensor:
        """``M(u, v)``; may overflow for far apart controls, prefer ``log_m``."""
        return th.exp(self.log_m)


class OffPolicyObjective(NamedTuple):
    loss: float
    std_err: float
    weights: GirsanovWeight
    max_abs_log_weight: float
    n_walkers: int
    diverged_count: int


def offpolicy_objective(
    problem: SocProblem,
    policy_u: BasePolicy,
    policy_v: BasePolicy,
    grid: TimeGrid,
    wiener: WienerPath,
    quadrature: Optional[th.Tensor] = None,
    deterministic: bool = False,
    strict: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
) -> OffPolicyObjective:
    """
    Estimate the objective of ``policy_u`` from walkers driven by ``policy_v``:
    ``mean_i [ (sum_k (1/2 |u_k|^2 + f_k) dt_k + g(X_K)) M_i(u, v) ]`` with ``u`` evaluated along ``X^v``.

    :param problem: the control problem
    :param policy_u: the control whose objective is estimated
    :param policy_v: the control that drives the walkers
    :param grid: time grid
    :param wiener: noise of the walkers
    :param quadrature: optional per-walker quadrature weights
    :param deterministic: use fixed-topology reductions over walkers
    :param strict: raise on diverged walkers instead of excluding them
    :param divergence_guard: norm beyond which a walker is diverged
    :return: the estimate, its standard error and the Girsanov weights
    """
    n = wiener.n_walkers
    energy_u = th.zeros(n, dtype=DTYPE)
    log_m = th.zeros(n, dtype=DTYPE)

    def hook(record: StepRecord) -> None:
        nonlocal energy_u, log_m
        if policy_u is policy_v:
            u = record.u
        else:
            u, _ = policy_u.evaluate(record.t, record.x)
        energy_u = energy_u + 0.5 * (u * u).sum(dim=-1) * record.dt
        gap = record.u - u
        log_m = log_m - (gap * record.dw).sum(dim=-1) - 0.5 * (gap * gap).sum(dim=-1) * record.dt

    batch = simulate_controlled(
        problem, policy_v, grid, wiener, divergence_guard=divergence_guard, strict=strict, step_hook=hook
    )
    terminal = problem.terminal_cost(batch.terminal)
    check_finite(terminal, "terminal cost")
    bracket = (energy_u + batch.acc_Bbar) + terminal
    girsanov = GirsanovWeight(log_m)
    weights = averaging_weights(batch, quadrature)

    active = batch.active
    shift = float(log_m[active].max())
    scaled = bracket * th.exp(log_m - shift)
    scale = math.exp(min(shift, 709.0))
    loss = float(weighted_sum(scaled, weights, deterministic)) * scale
    if shift > 709.0 or not math.isfinite(loss):
        raise NumericalError(f"off-policy objective overflows: max log M = {shift:.1f}")

    n_active = int(active.sum())
    std_err = 0.0
    if quadrature is None and n_active > 1:
        mean_scaled = weighted_sum(scaled, weights, deterministic)
        var = weighted_sum((scaled - mean_scaled) ** 2, weights, deterministic)
        std_err = float((var / (n_active - 1)).sqrt()) * scale
    return OffPolicyObjective(
        loss=loss,
        std_err=std_err,
        weights=girsanov,
        max_abs_log_weight=girsanov.max_abs,
        n_walkers=batch.n_walkers,
        diverged_count=batch.diverged_count,
    )
