from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch as th

from simfree_soc.common.type_aliases import (
    ControlFn,
    DriftFn,
    DriftVjpFn,
    RunningCostFn,
    TerminalCostFn,
    VolatilityFn,
)
from simfree_soc.common.utils import DTYPE, autograd_vjp

TensorLike = Union[float, Sequence[float], Sequence[Sequence[float]], th.Tensor]

# Number of instants at which the volatility is checked for invertibility
N_CHECK_TIMES = 9


def as_vector(value: TensorLike, dim: int, name: str = "vector") -> th.Tensor:
    """
    Convert a scalar (broadcast) or a sequence to a float64 vector of length ``dim``.
    """
    vector = th.as_tensor(value, dtype=DTYPE)
    if vector.dim() == 0:
        vector = vector.expand(dim).clone()
    if tuple(vector.shape) != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {tuple(vector.shape)}")
    return vector


def as_matrix(value: TensorLike, dim: int, name: str = "matrix") -> th.Tensor:
    """
    Convert a scalar ``c`` (meaning ``c * I``) or a dense row-major array to a (dim, dim) float64 matrix.
    """
    matrix = th.as_tensor(value, dtype=DTYPE)
    if matrix.dim() == 0:
        matrix = matrix * th.eye(dim, dtype=DTYPE)
    if tuple(matrix.shape) != (dim, dim):
        raise ValueError(f"{name} must have shape ({dim}, {dim}), got {tuple(matrix.shape)}")
    return matrix


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """
    Law of the initial state: a point mass (``std`` all zeros) or a Gaussian with diagonal covariance.

    :param mean: mean vector, shape (d,)
    :param std: per-coordinate standard deviation, shape (d,)
    """

    mean: th.Tensor
    std: th.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape or self.mean.dim() != 1:
            raise ValueError(
                f"Mean and std must be vectors of equal length, got {tuple(self.mean.shape)}, {tuple(self.std.shape)}"
            )
        if bool((self.std < 0).any()) or not bool(th.isfinite(self.std).all() and th.isfinite(self.mean).all()):
            raise ValueError("Initial law needs a finite mean and nonnegative finite standard deviations")

    @classmethod
    def point_mass(cls, x0: TensorLike, dim: int) -> "InitialLaw":
        mean = as_vector(x0, dim, "x0")
        return cls(mean=mean, std=th.zeros(dim, dtype=DTYPE))

    @classmethod
    def gaussian(cls, mean: TensorLike, var: TensorLike, dim: int) -> "InitialLaw":
        var = as_vector(var, dim, "variance")
        if bool((var < 0).any()):
            raise ValueError("Variances must be nonnegative")
        return cls(mean=as_vector(mean, dim, "mean"), std=th.sqrt(var))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_point_mass(self) -> bool:
        return bool((self.std == 0).all())

    def sample(self, noise: th.Tensor) -> th.Tensor:
        """
        Map standard normal draws to initial states.

        :param noise: standard normal tensor of shape (n, d)
        :return: initial states, shape (n, d)
        """
        return self.mean + self.std * noise


def zero_drift(t: float, x: th.Tensor) -> th.Tensor:
    return th.zeros_like(x)


def zero_drift_vjp(t: float, x: th.Tensor, v: th.Tensor) -> th.Tensor:
    return th.zeros_like(x)


def zero_running_cost(t: float, x: th.Tensor) -> th.Tensor:
    return th.zeros(x.shape[:-1], dtype=x.dtype)


def zero_running_cost_grad(t: float, x: th.Tensor) -> th.Tensor:
    return th.zeros_like(x)


def constant_volatility(sigma: th.Tensor) -> VolatilityFn:
    """Volatility function returning the same matrix at all times."""

    def volatility(t: float) -> th.Tensor:
        return sigma

    return volatility


@dataclass(frozen=True, eq=False)
class SocProblem:
    """
    A stochastic optimal control problem

        min_u E[ int_0^T (1/2 |u_t(X_t)|^2 + f_t(X_t)) dt + g(X_T) ],
        dX_t = (b_t(X_t) + sigma_t u_t(X_t)) dt + sigma_t dW_t,  X_0 ~ mu_0.

    All callables are batched over walkers: states have shape (n, d),
    drifts (n, d), costs (n,).

    :param dim: state dimension d
    :param horizon: final time T
    :param base_drift: ``b(t, x)``
    :param volatility: ``sigma(t)``, a (d, d) matrix
    :param running_cost: ``f(t, x)``
    :param terminal_cost: ``g(x)``
    :param initial_law: ``mu_0``
    :param base_drift_vjp: ``(t, x, v) -> v^T d_x b(t, x)``; autograd is used when missing
    :param running_cost_grad: ``(t, x) -> d_x f(t, x)``; autograd is used when missing
    :param terminal_cost_grad: ``x -> d_x g(x)``; autograd is used when missing
    :param optimal_control: analytic optimal control ``(t, x) -> u*(t, x)``, when known
    :param kind: family tag (``generic``, ``linear-ou``, ``lqr``, ``follmer``, ``finetune``)
    :param name: human readable name
    """

    dim: int
    horizon: float
    base_drift: DriftFn
    volatility: VolatilityFn
    running_cost: RunningCostFn
    terminal_cost: TerminalCostFn
    initial_law: InitialLaw
    base_drift_vjp: Optional[DriftVjpFn] = None
    running_cost_grad: Optional[DriftFn] = None
    terminal_cost_grad: Optional[Callable[[th.Tensor], th.Tensor]] = None
    optimal_control: Optional[ControlFn] = None
    kind: str = "generic"
    name: str = "custom"

    def __post_init__(self) -> None:
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"The dimension must be a positive integer, got {self.dim}")
        if not self.horizon > 0:
            raise ValueError(f"The horizon must be positive, got {self.horizon}")
        if self.initial_law.dim != self.dim:
            raise ValueError(f"Initial law has dimension {self.initial_law.dim}, expected {self.dim}")
        self._check_volatility()
        self._check_shapes()

    def _check_volatility(self) -> None:
        for t in th.linspace(0.0, self.horizon, N_CHECK_TIMES, dtype=DTYPE).tolist():
            sigma = self.volatility(t)
            if tuple(sigma.shape) != (self.dim, self.dim):
                raise ValueError(f"volatility({t:.3g}) has shape {tuple(sigma.shape)}, expected {(self.dim, self.dim)}")
            if not bool(th.isfinite(sigma).all()):
                raise ValueError(f"volatility({t:.3g}) is not finite")
            singular_values = th.linalg.svdvals(sigma)
            if float(singular_values.min()) <= 1e-12 * max(float(singular_values.max()), 1e-300):
                raise ValueError(f"volatility({t:.3g}) is not invertible")

    def _check_shapes(self) -> None:
        x = th.zeros((2, self.dim), dtype=DTYPE)
        drift = self.base_drift(0.0, x)
        if tuple(drift.shape) != (2, self.dim):
            raise ValueError(f"base_drift returns shape {tuple(drift.shape)} for a batch of shape {(2, self.dim)}")
        if tuple(self.running_cost(0.0, x).shape) != (2,):
            raise ValueError("running_cost must return one value per walker")
        if tuple(self.terminal_cost(x).shape) != (2,):
            raise ValueError("terminal_cost must return one value per walker")

    def drift_vjp(self, t: float, x: th.Tensor, v: th.Tensor) -> th.Tensor:
        """``v^T d_x b(t, x)`` for every walker."""
        if self.base_drift_vjp is not None:
            return self.base_drift_vjp(t, x, v)
        return autograd_vjp(self.base_drift, t, x, v=v)

    def running_grad(self, t: float, x: th.Tensor) -> th.Tensor:
        """``d_x f(t, x)`` for every walker."""
        if self.running_cost_grad is not None:
            return self.running_cost_grad(t, x)
        return autograd_vjp(self.running_cost, t, x, v=th.ones(x.shape[0], dtype=x.dtype))

    def terminal_grad(self, x: th.Tensor) -> th.Tensor:
        """``d_x g(x)`` for every walker."""
        if self.terminal_cost_grad is not None:
            return self.terminal_cost_grad(x)
        return autograd_vjp(self.terminal_cost, x, v=th.ones(x.shape[0], dtype=x.dtype))
