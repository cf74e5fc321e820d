"""
Linear Ornstein-Uhlenbeck and linear-quadratic regulator problems,
with their analytic optimal controls.
"""
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np
import torch as th

from simfree_soc.common.errors import RiccatiDivergenceError
from simfree_soc.problems.base import (
    InitialLaw,
    SocProblem,
    TensorLike,
    as_matrix,
    as_vector,
    constant_volatility,
    zero_running_cost,
    zero_running_cost_grad,
)

RICCATI_BLOW_UP = 1e8
MIN_RICCATI_STEPS = 16


def default_initial_law(dim: int) -> InitialLaw:
    """``N(0, I / 2)``, the initial law of the OU and LQR experiments."""
    return InitialLaw.gaussian(0.0, 0.5, dim)


@dataclass(frozen=True, eq=False)
class LinearOuSpec:
    """
    ``b(x) = A x``, ``f = 0``, ``g(x) = gamma . x``, constant volatility ``sigma0``.
    """

    A: th.Tensor
    gamma: th.Tensor
    sigma0: th.Tensor

    def __post_init__(self) -> None:
        dim = self.gamma.shape[0]
        if self.gamma.dim() != 1:
            raise ValueError(f"gamma must be a vector, got shape {tuple(self.gamma.shape)}")
        for name in ("A", "sigma0"):
            if tuple(getattr(self, name).shape) != (dim, dim):
                raise ValueError(f"{name} must have shape ({dim}, {dim}), got {tuple(getattr(self, name).shape)}")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def from_values(cls, A: TensorLike, gamma: TensorLike, sigma0: TensorLike, dim: int) -> "LinearOuSpec":
        return cls(A=as_matrix(A, dim, "A"), gamma=as_vector(gamma, dim, "gamma"), sigma0=as_matrix(sigma0, dim, "sigma0"))


@dataclass(frozen=True, eq=False)
class LqrSpec:
    """
    ``b(x) = A x``, ``f(x) = x^T P x``, ``g(x) = x^T Q x``, constant volatility ``sigma0``.
    """

    A: th.Tensor
    P: th.Tensor
    Q: th.Tensor
    sigma0: th.Tensor

    def __post_init__(self) -> None:
        dim = self.A.shape[0]
        for name in ("A", "P", "Q", "sigma0"):
            if tuple(getattr(self, name).shape) != (dim, dim):
                raise ValueError(f"{name} must have shape ({dim}, {dim}), got {tuple(getattr(self, name).shape)}")
        for name in ("P", "Q"):
            matrix = getattr(self, name)
            scale = max(float(matrix.abs().max()), 1.0)
            if float((matrix - matrix.T).abs().max()) > 1e-12 * scale:
                raise ValueError(f"{name} must be symmetric")
            if float(th.linalg.eigvalsh(matrix).min()) < -1e-12 * scale:
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_values(cls, A: TensorLike, P: TensorLike, Q: TensorLike, sigma0: TensorLike, dim: int) -> "LqrSpec":
        return cls(
            A=as_matrix(A, dim, "A"),
            P=as_matrix(P, dim, "P"),
            Q=as_matrix(Q, dim, "Q"),
            sigma0=as_matrix(sigma0, dim, "sigma0"),
        )


def linear_ou_spec(dim: int = 20) -> LinearOuSpec:
    """Preset: ``A = -I``, ``gamma = 1``, ``sigma0 = I``."""
    return LinearOuSpec.from_values(A=-1.0, gamma=1.0, sigma0=1.0, dim=dim)


def lqr_easy_spec(dim: int = 20) -> LqrSpec:
    """Preset: ``A = 0.2 I``, ``P = 0.2 I``, ``Q = 0.1 I``, ``sigma0 = I``."""
    return LqrSpec.from_values(A=0.2, P=0.2, Q=0.1, sigma0=1.0, dim=dim)


def lqr_hard_spec(dim: int = 20) -> LqrSpec:
    """Preset: ``A = I``, ``P = I``, ``Q = 0.5 I``, ``sigma0 = I``."""
    return LqrSpec.from_values(A=1.0, P=1.0, Q=0.5, sigma0=1.0, dim=dim)


def _broadcast_control(u: th.Tensor, x: th.Tensor) -> th.Tensor:
    if x.dim() == 1:
        return u.clone()
    return u.expand(x.shape[0], -1).clone()


def linear_ou_optimal_control(spec: LinearOuSpec, horizon: float, t: float, x: th.Tensor) -> th.Tensor:
    """
    ``u*(t, x) = -sigma0^T expm(A^T (T - t)) gamma``, independent of ``x``.

    :param spec: the OU problem
    :param horizon: final time T
    :param t: time in [0, T]
    :param x: state (d,) or batch (n, d); only its shape is used
    :return: the optimal control with the shape of ``x``
    """
    if not 0.0 <= t <= horizon:
        raise ValueError(f"t must lie in [0, {horizon}], got {t}")
    propagator = th.linalg.matrix_exp(spec.A.T * (horizon - t))
    u = -spec.sigma0.T @ (propagator @ spec.gamma)
    return _broadcast_control(u, x)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """
    Solution of the Riccati equation on a uniform grid.

    :param times: recorded instants, shape (m,)
    :param F: matrices at the recorded instants, shape (m, d, d)
    """

    times: th.Tensor
    F: th.Tensor

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def at(self, t: float) -> th.Tensor:
        """
        ``F_t``, linearly interpolated in time between recorded instants.

        :param t: time in [0, T]
        """
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"t must lie in [0, {self.horizon}], got {t}")
        index = int(np.searchsorted(self.times.numpy(), t, side="right")) - 1
        index = min(max(index, 0), self.times.shape[0] - 2)
        t_left, t_right = float(self.times[index]), float(self.times[index + 1])
        weight = (t - t_left) / (t_right - t_left)
        return (1.0 - weight) * self.F[index] + weight * self.F[index + 1]


def solve_riccati(spec: LqrSpec, horizon: float, steps: int, record_every: int = 1) -> RiccatiSolution:
    """
    Integrate ``dF/dt + A^T F + F A - 2 F sigma0 sigma0^T F + P = 0``, ``F_T = Q``
    backward in time with the classical Runge-Kutta scheme, symmetrizing after each step.

    :param spec: the LQR problem
    :param horizon: final time T
    :param steps: number of integration steps (>= 16)
    :param record_every: keep one matrix every ``record_every`` steps (must divide ``steps``)
    :return: the solution on the recorded grid
    """
    if steps < MIN_RICCATI_STEPS:
        raise ValueError(f"Need at least {MIN_RICCATI_STEPS} Riccati steps, got {steps}")
    if record_every < 1 or steps % record_every != 0:
        raise ValueError(f"record_every={record_every} must be a positive divisor of steps={steps}")
    A = spec.A.numpy()
    P = spec.P.numpy()
    S = (spec.sigma0 @ spec.sigma0.T).numpy()
    h = horizon / steps

    def rhs(F: np.ndarray) -> np.ndarray:
        return -(A.T @ F + F @ A - 2.0 * F @ S @ F + P)

    F = spec.Q.numpy().copy()
    recorded = [F]
    for k in range(steps, 0, -1):
        k1 = rhs(F)
        k2 = rhs(F - 0.5 * h * k1)
        k3 = rhs(F - 0.5 * h * k2)
        k4 = rhs(F - h * k3)
        F = F - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        F = 0.5 * (F + F.T)
        if not np.all(np.abs(F) <= RICCATI_BLOW_UP):
            raise RiccatiDivergenceError(time=(k - 1) * h, threshold=RICCATI_BLOW_UP)
        if (k - 1) % record_every == 0:
            recorded.append(F)

    times = np.arange(0, steps + 1, record_every, dtype=np.float64) * h
    times[-1] = horizon
    return RiccatiSolution(times=th.as_tensor(times), F=th.as_tensor(np.stack(recorded[::-1])))


def lqr_optimal_control(riccati: RiccatiSolution, sigma0: th.Tensor, t: float, x: th.Tensor) -> th.Tensor:
    """
    ``u*(t, x) = -2 sigma0^T F_t x``.

    :param riccati: solution of the Riccati equation
    :param sigma0: volatility matrix
    :param t: time in [0, T]
    :param x: state (d,) or batch (n, d)
    :return: the optimal control with the shape of ``x``
    """
    gain = -2.0 * sigma0.T @ riccati.at(t)
    return x @ gain.T


def linear_ou_problem(spec: LinearOuSpec, horizon: float = 1.0, initial_law: Optional[InitialLaw] = None) -> SocProblem:
    """
    Build the linear OU control problem of ``spec``, with its analytic optimal control attached.
    """
    A, gamma = spec.A, spec.gamma

    def base_drift(t: float, x: th.Tensor) -> th.Tensor:
        return x @ A.T

    def base_drift_vjp(t: float, x: th.Tensor, v: th.Tensor) -> th.Tensor:
        return v @ A

    def terminal_cost(x: th.Tensor) -> th.Tensor:
        return x @ gamma

    def terminal_cost_grad(x: th.Tensor) -> th.Tensor:
        return gamma.expand_as(x).clone()

    return SocProblem(
        dim=spec.dim,
        horizon=horizon,
        base_drift=base_drift,
        volatility=constant_volatility(spec.sigma0),
        running_cost=zero_running_cost,
        terminal_cost=terminal_cost,
        initial_law=initial_law if initial_law is not None else default_initial_law(spec.dim),
        base_drift_vjp=base_drift_vjp,
        running_cost_grad=zero_running_cost_grad,
        terminal_cost_grad=terminal_cost_grad,
        optimal_control=partial(linear_ou_optimal_control, spec, horizon),
        kind="linear-ou",
        name="linear-ou",
    )


def lqr_problem(
    spec: LqrSpec,
    horizon: float = 1.0,
    riccati_steps: int = 4096,
    initial_law: Optional[InitialLaw] = None,
    name: str = "lqr",
) -> SocProblem:
    """
    Build the LQR problem of ``spec``; the Riccati equation is solved once
    and the resulting optimal control is attached to the problem.
    """
    A, P, Q = spec.A, spec.P, spec.Q
    P_sym, Q_sym = P + P.T, Q + Q.T
    riccati = solve_riccati(spec, horizon, riccati_steps)

    def base_drift(t: float, x: th.Tensor) -> th.Tensor:
        return x @ A.T

    def base_drift_vjp(t: float, x: th.Tensor, v: th.Tensor) -> th.Tensor:
        return v @ A

    def running_cost(t: float, x: th.Tensor) -> th.Tensor:
        return ((x @ P) * x).sum(dim=-1)

    def running_cost_grad(t: float, x: th.Tensor) -> th.Tensor:
        return x @ P_sym

    def terminal_cost(x: th.Tensor) -> th.Tensor:
        return ((x @ Q) * x).sum(dim=-1)

    def terminal_cost_grad(x: th.Tensor) -> th.Tensor:
        return x @ Q_sym

    return SocProblem(
        dim=spec.dim,
        horizon=horizon,
        base_drift=base_drift,
        volatility=constant_volatility(spec.sigma0),
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        initial_law=initial_law if initial_law is not None else default_initial_law(spec.dim),
        base_drift_vjp=base_drift_vjp,
        running_cost_grad=running_cost_grad,
        terminal_cost_grad=terminal_cost_grad,
        optimal_control=partial(lqr_optimal_control, riccati, spec.sigma0),
        kind="lqr",
        name=name,
    )
