"""
Control problems whose optimally controlled process samples a target:
the Follmer problem (target ``e^{-U} / Z`` from a point mass at 0 in unit time)
and its generalization, fine-tuning a base diffusion with a terminal reward.
"""
from typing import Callable, Optional, Sequence, Union

import torch as th

from simfree_soc.common.type_aliases import DriftFn, DriftVjpFn, VolatilityFn
from simfree_soc.common.utils import DTYPE
from simfree_soc.problems.base import (
    InitialLaw,
    SocProblem,
    constant_volatility,
    zero_drift,
    zero_drift_vjp,
    zero_running_cost,
    zero_running_cost_grad,
)

PotentialFn = Callable[[th.Tensor], th.Tensor]


def half_square_norm(x: th.Tensor) -> th.Tensor:
    """``1/2 |x|^2`` per walker."""
    return 0.5 * (x * x).sum(dim=-1)


def gaussian_potential(x: th.Tensor) -> th.Tensor:
    """Potential of the standard Gaussian, ``U(x) = 1/2 |x|^2`` (``Z = (2 pi)^{d/2}``)."""
    return half_square_norm(x)


def gaussian_potential_grad(x: th.Tensor) -> th.Tensor:
    return x.clone()


def shifted_gaussian_potential(mean: Union[float, Sequence[float], th.Tensor]) -> PotentialFn:
    """``U(x) = 1/2 |x - m|^2``; its normalizing constant is ``(2 pi)^{d/2}`` for every ``m``."""
    mean_tensor = th.as_tensor(mean, dtype=DTYPE)

    def potential(x: th.Tensor) -> th.Tensor:
        return half_square_norm(x - mean_tensor)

    return potential


def _check_on_test_points(fn: PotentialFn, dim: int, name: str) -> None:
    generator = th.Generator().manual_seed(0)
    points = th.cat([th.zeros((1, dim), dtype=DTYPE), th.randn((4, dim), generator=generator, dtype=DTYPE)])
    values = fn(points)
    if tuple(values.shape) != (5,):
        raise ValueError(f"{name} must return one value per walker, got shape {tuple(values.shape)}")
    if not bool(th.isfinite(values).all()):
        raise ValueError(f"{name} is not finite on the test points")


def follmer_problem(
    potential: PotentialFn,
    potential_grad: Optional[PotentialFn] = None,
    dim: int = 10,
    name: str = "follmer",
) -> SocProblem:
    """
    Control problem with ``b = 0``, ``sigma = I``, ``T = 1``, ``f = 0``,
    ``g(x) = U(x) - 1/2 |x|^2`` and ``X_0 = 0``.

    :param potential: ``U``, batched
    :param potential_grad: ``grad U``, batched; autograd is used when missing
    :param dim: state dimension
    :param name: problem name
    :return: the problem
    """
    _check_on_test_points(potential, dim, "U")

    def terminal_cost(x: th.Tensor) -> th.Tensor:
        return potential(x) - half_square_norm(x)

    terminal_cost_grad = None
    if potential_grad is not None:

        def terminal_cost_grad(x: th.Tensor) -> th.Tensor:
            return potential_grad(x) - x

    return SocProblem(
        dim=dim,
        horizon=1.0,
        base_drift=zero_drift,
        volatility=constant_volatility(th.eye(dim, dtype=DTYPE)),
        running_cost=zero_running_cost,
        terminal_cost=terminal_cost,
        initial_law=InitialLaw.point_mass(0.0, dim),
        base_drift_vjp=zero_drift_vjp,
        running_cost_grad=zero_running_cost_grad,
        terminal_cost_grad=terminal_cost_grad,
        kind="follmer",
        name=name,
    )


def finetune_problem(
    base_drift: DriftFn,
    volatility: Union[VolatilityFn, th.Tensor],
    horizon: float,
    reward: PotentialFn,
    dim: int,
    reward_grad: Optional[PotentialFn] = None,
    base_drift_vjp: Optional[DriftVjpFn] = None,
    initial_law: Optional[InitialLaw] = None,
    name: str = "finetune",
) -> SocProblem:
    """
    Tilt the law of a base diffusion started at 0 by ``e^{r(Y_T)}``:
    control problem with ``f = 0`` and ``g = -r``.

    :param base_drift: drift ``b(t, x)`` of the base process
    :param volatility: ``sigma(t)`` or a constant (d, d) matrix
    :param horizon: final time T
    :param reward: terminal reward ``r``, batched
    :param dim: state dimension
    :param reward_grad: ``grad r``; autograd is used when missing
    :param base_drift_vjp: ``v^T d_x b``; autograd is used when missing
    :param initial_law: must be the point mass at 0 (the default)
    :param name: problem name
    :return: the problem
    """
    if initial_law is not None and not (initial_law.is_point_mass and bool((initial_law.mean == 0).all())):
        raise ValueError("Fine-tuning requires the base process to start at Y_0 ~ delta_0 (point mass at the origin)")
    _check_on_test_points(reward, dim, "r")
    if isinstance(volatility, th.Tensor):
        volatility = constant_volatility(volatility.to(DTYPE))

    def terminal_cost(x: th.Tensor) -> th.Tensor:
        return -reward(x)

    terminal_cost_grad = None
    if reward_grad is not None:

        def terminal_cost_grad(x: th.Tensor) -> th.Tensor:
            return -reward_grad(x)

    return SocProblem(
        dim=dim,
        horizon=horizon,
        base_drift=base_drift,
        volatility=volatility,
        running_cost=zero_running_cost,
        terminal_cost=terminal_cost,
        initial_law=InitialLaw.point_mass(0.0, dim),
        base_drift_vjp=base_drift_vjp,
        running_cost_grad=zero_running_cost_grad,
        terminal_cost_grad=terminal_cost_grad,
        kind="finetune",
        name=name,
    )


def linear_tilt_reward(tilt: th.Tensor) -> PotentialFn:
    """``r(x) = a . x``. With a standard Brownian base on [0, 1], ``log Z = |a|^2 / 2``."""

    def reward(x: th.Tensor) -> th.Tensor:
        return x @ tilt

    return reward


def finetune_toy_problem(tilt: Union[Sequence[float], th.Tensor] = (1.0, -0.5)) -> SocProblem:
    """
    Low-dimensional fine-tuning problem with a closed form target:
    Brownian base on [0, 1] from 0, linear reward ``a . x``, target ``N(a, I)``.
    """
    tilt = th.as_tensor(tilt, dtype=DTYPE)
    dim = tilt.shape[0]

    def reward_grad(x: th.Tensor) -> th.Tensor:
        return tilt.expand_as(x).clone()

    return finetune_problem(
        base_drift=zero_drift,
        volatility=th.eye(dim, dtype=DTYPE),
        horizon=1.0,
        reward=linear_tilt_reward(tilt),
        dim=dim,
        reward_grad=reward_grad,
        base_drift_vjp=zero_drift_vjp,
        name="finetune-toy",
    )
