"""
Neal's funnel: ``x_0 ~ N(0, s^2)`` and ``x_i | x_0 ~ N(0, e^{x_0})`` for ``i >= 1``.
The density is normalized, so its log normalizing constant is 0.
"""
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch as th

from simfree_soc.common.utils import DTYPE

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FunnelTarget:
    """
    :param dim: dimension (10 in the standard benchmark)
    :param sigma0_funnel: standard deviation ``s`` of the ``x_0`` marginal
    """

    dim: int = 10
    sigma0_funnel: float = 1.0

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ValueError(f"The funnel needs at least two coordinates, got dim={self.dim}")
        if not self.sigma0_funnel > 0:
            raise ValueError(f"sigma0_funnel must be positive, got {self.sigma0_funnel}")

    def sample(self, n: int, rng: np.random.Generator) -> th.Tensor:
        return funnel_sample(self, n, rng)


def _split(target: FunnelTarget, x: th.Tensor):
    if x.shape[-1] != target.dim:
        raise ValueError(f"Expected states of dimension {target.dim}, got {x.shape[-1]}")
    if not bool(th.isfinite(x).all()):
        raise ValueError("The funnel density is only defined for finite states")
    x0 = x[..., 0]
    rest = x[..., 1:]
    inv_var = th.exp(-x0)
    # e^{-x0} * sum x_i^2, never forming x_i^2 / e^{x0}
    weighted_sq = inv_var * (rest * rest).sum(dim=-1)
    return x0, rest, inv_var, weighted_sq


def funnel_log_density(target: FunnelTarget, x: th.Tensor) -> th.Tensor:
    """
    :param target: the funnel
    :param x: state (d,) or batch (n, d)
    :return: ``log rho(x)``, shape () or (n,)
    """
    x0, _, _, weighted_sq = _split(target, x)
    s2 = target.sigma0_funnel**2
    n_rest = target.dim - 1
    return (
        -0.5 * x0 * x0 / s2
        - 0.5 * (LOG_2PI + math.log(s2))
        - 0.5 * n_rest * LOG_2PI
        - 0.5 * n_rest * x0
        - 0.5 * weighted_sq
    )


def funnel_score(target: FunnelTarget, x: th.Tensor) -> th.Tensor:
    """
    Gradient of ``funnel_log_density``.

    :param target: the funnel
    :param x: state (d,) or batch (n, d)
    :return: ``grad log rho(x)`` with the shape of ``x``
    """
    x0, rest, inv_var, weighted_sq = _split(target, x)
    s2 = target.sigma0_funnel**2
    n_rest = target.dim - 1
    d0 = -x0 / s2 - 0.5 * n_rest + 0.5 * weighted_sq
    d_rest = -inv_var.unsqueeze(-1) * rest
    return th.cat([d0.unsqueeze(-1), d_rest], dim=-1)


def funnel_score_vjp(target: FunnelTarget, x: th.Tensor, v: th.Tensor) -> th.Tensor:
    """
    ``v^T d_x score(x)``, i.e. the Hessian of ``log rho`` applied to ``v`` (the Hessian is symmetric).

    :param target: the funnel
    :param x: state (d,) or batch (n, d)
    :param v: cotangent with the shape of ``x``
    :return: tensor with the shape of ``x``
    """
    x0, rest, inv_var, weighted_sq = _split(target, x)
    s2 = target.sigma0_funnel**2
    v0, v_rest = v[..., 0], v[..., 1:]
    coupling = inv_var.unsqueeze(-1) * rest
    h0 = (-1.0 / s2 - 0.5 * weighted_sq) * v0 + (coupling * v_rest).sum(dim=-1)
    h_rest = coupling * v0.unsqueeze(-1) - inv_var.unsqueeze(-1) * v_rest
    return th.cat([h0.unsqueeze(-1), h_rest], dim=-1)


def funnel_potential(target: FunnelTarget) -> Callable[[th.Tensor], th.Tensor]:
    """Potential ``U = -log rho`` (normalized, so ``Z = 1``)."""

    def potential(x: th.Tensor) -> th.Tensor:
        return -funnel_log_density(target, x)

    return potential


def funnel_potential_grad(target: FunnelTarget) -> Callable[[th.Tensor], th.Tensor]:
    def potential_grad(x: th.Tensor) -> th.Tensor:
        return -funnel_score(target, x)

    return potential_grad


def funnel_sample(target: FunnelTarget, n: int, rng: np.random.Generator) -> th.Tensor:
    """
    Exact samples, used as reference statistics.

    :param target: the funnel
    :param n: number of samples
    :param rng: numpy generator
    :return: tensor of shape (n, d)
    """
    x0 = rng.normal(0.0, target.sigma0_funnel, size=n)
    rest = rng.standard_normal(size=(n, target.dim - 1)) * np.exp(0.5 * x0)[:, None]
    return th.as_tensor(np.concatenate([x0[:, None], rest], axis=1), dtype=DTYPE)
