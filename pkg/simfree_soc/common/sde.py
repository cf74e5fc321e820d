"""
Time grids, Wiener increments and Euler-Maruyama simulation of the controlled SDE

    dX_t = (b_t(X_t) + sigma_t u_t(X_t)) dt + sigma_t dW_t

with the per-walker accumulators

    A += 1/2 |u|^2 dt,  Abar += 1/2 |u|^2 dt (detached),  Bbar += f dt,  C += u . dW

updated on the fly, so that no state history is needed unless requested.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch as th

from simfree_soc.common.errors import DivergedWalkersError
from simfree_soc.common.rng import INIT_STREAM, NOISE_STREAM, WalkerStreams
from simfree_soc.common.utils import DTYPE, check_finite

if TYPE_CHECKING:
    from simfree_soc.common.policies import BasePolicy
    from simfree_soc.problems.base import SocProblem

GRID_MODES = ("randomized", "uniform")
DEFAULT_DIVERGENCE_GUARD = 1e6


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """
    Ordered time instants ``0 = t_0 <= t_1 <= ... <= t_K = T``.
    Grids built by ``make_randomized_grid`` are strictly increasing.

    :param times: tensor of shape (K + 1,)
    """

    times: th.Tensor

    def __post_init__(self) -> None:
        times = self.times
        if times.dim() != 1 or times.shape[0] < 2:
            raise ValueError(f"A time grid needs at least two instants, got shape {tuple(times.shape)}")
        if not bool(th.isfinite(times).all()):
            raise ValueError("Time grid contains non-finite instants")
        if float(times[0]) != 0.0:
            raise ValueError(f"Time grid must start at 0, got {float(times[0])}")
        if bool((times[1:] < times[:-1]).any()):
            raise ValueError("Time grid must be sorted")

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def is_strict(self) -> bool:
        return bool((self.steps() > 0).all())

    def steps(self) -> th.Tensor:
        """Step sizes, shape (K,)."""
        return self.times[1:] - self.times[:-1]


def uniform_grid(n_steps: int, horizon: float) -> TimeGrid:
    """
    Equispaced grid ``t_k = k T / K``.

    :param n_steps: number of steps K
    :param horizon: final time T
    """
    _check_grid_args(n_steps, horizon)
    times = th.arange(n_steps + 1, dtype=DTYPE) * (horizon / n_steps)
    times[-1] = horizon
    return TimeGrid(times)


def make_randomized_grid(n_steps: int, horizon: float, rng: np.random.Generator, mode: str = "randomized") -> TimeGrid:
    """
    Time grid with K - 1 interior instants drawn as sorted i.i.d. Uniform(0, T) variables,
    plus both endpoints, which gives exactly K steps.

    :param n_steps: number of steps K
    :param horizon: final time T
    :param rng: generator for the interior instants (unused in ``uniform`` mode)
    :param mode: ``randomized`` or ``uniform``
    :return: the grid
    """
    _check_grid_args(n_steps, horizon)
    if mode == "uniform":
        return uniform_grid(n_steps, horizon)
    if mode != "randomized":
        raise ValueError(f"Unknown grid mode '{mode}', expected one of {GRID_MODES}")
    while True:
        interior = np.sort(rng.uniform(0.0, horizon, size=n_steps - 1))
        times = np.concatenate(([0.0], interior, [horizon]))
        # Ties and draws at exactly 0 have probability zero but would give empty steps
        if np.all(np.diff(times) > 0):
            return TimeGrid(th.as_tensor(times, dtype=DTYPE))


def _check_grid_args(n_steps: int, horizon: float) -> None:
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"The number of steps must be a positive integer, got {n_steps}")
    if not horizon > 0 or not np.isfinite(horizon):
        raise ValueError(f"The horizon must be positive, got {horizon}")


@dataclass(frozen=True, eq=False)
class WienerPath:
    """
    Noise realization of a walker batch.

    :param increments: Brownian increments, shape (n, K, d), ``sqrt(dt_k) * zeta``
    :param initial_noise: standard normal draws used to sample the initial states, shape (n, d)
    """

    increments: th.Tensor
    initial_noise: th.Tensor

    def __post_init__(self) -> None:
        if self.increments.dim() != 3:
            raise ValueError(f"Wiener increments must have shape (n, K, d), got {tuple(self.increments.shape)}")
        n, _, d = self.increments.shape
        if tuple(self.initial_noise.shape) != (n, d):
            raise ValueError(f"Initial noise must have shape {(n, d)}, got {tuple(self.initial_noise.shape)}")

    @property
    def n_walkers(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]


def sample_wiener_increments(
    grid: TimeGrid,
    n: int,
    d: int,
    rng: WalkerStreams,
    threads: int = 1,
    walker_order: Optional[Sequence[int]] = None,
) -> WienerPath:
    """
    Draw the Brownian increments of ``n`` walkers on ``grid``.
    Walker ``i`` reads its own Philox stream, so the result does not depend
    on ``threads`` nor on ``walker_order``.

    :param grid: time grid with K steps
    :param n: number of walkers
    :param d: state dimension
    :param rng: per-walker streams of the current iteration
    :param threads: number of worker threads used to fill the array
    :param walker_order: order in which walkers are generated (a permutation of ``range(n)``)
    :return: the Wiener path
    """
    if n < 1 or d < 1:
        raise ValueError(f"Need n >= 1 and d >= 1, got n={n}, d={d}")
    n_steps = grid.n_steps
    zeta = np.empty((n, n_steps, d), dtype=np.float64)
    init = np.empty((n, d), dtype=np.float64)

    def fill(indices: Iterable[int]) -> None:
        for i in indices:
            rng.walker(i, NOISE_STREAM).standard_normal(size=(n_steps, d), out=zeta[i])
            rng.walker(i, INIT_STREAM).standard_normal(size=d, out=init[i])

    order = list(range(n)) if walker_order is None else [int(i) for i in walker_order]
    if sorted(order) != list(range(n)):
        raise ValueError("walker_order must be a permutation of range(n)")
    if threads > 1 and n > 1:
        chunks = [order[start::threads] for start in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as executor:
            list(executor.map(fill, chunks))
    else:
        fill(order)

    sqrt_dt = th.sqrt(grid.steps()).reshape(1, n_steps, 1)
    increments = sqrt_dt * th.from_numpy(zeta)
    return WienerPath(increments=increments, initial_noise=th.from_numpy(init))


class StepRecord(NamedTuple):
    """Everything known about one Euler-Maruyama step, handed to step hooks."""

    step: int
    t: float
    dt: float
    x: th.Tensor
    u: th.Tensor
    dw: th.Tensor
    running_cost: th.Tensor
    active: th.Tensor
    tape: Any


StepHook = Callable[[StepRecord], None]


@dataclass(eq=False)
class TrajectoryBatch:
    """
    Result of a batched simulation.

    ``acc_A`` and ``acc_Abar`` hold the same values; the latter is the copy
    that estimators treat as a constant with respect to the parameters.
    """

    acc_A: th.Tensor
    acc_Abar: th.Tensor
    acc_Bbar: th.Tensor
    acc_C: th.Tensor
    initial: th.Tensor
    terminal: th.Tensor
    active: th.Tensor
    wiener: WienerPath
    grid: TimeGrid
    states: Optional[th.Tensor] = None
    stored_step_records: int = 0

    @property
    def n_walkers(self) -> int:
        return self.terminal.shape[0]

    @property
    def diverged_count(self) -> int:
        return int((~self.active).sum())


def euler_maruyama_step(
    x: th.Tensor,
    t: float,
    dt: float,
    drift: th.Tensor,
    sigma: th.Tensor,
    dw: th.Tensor,
    step: Optional[int] = None,
) -> th.Tensor:
    """
    One Euler-Maruyama step ``x + drift * dt + sigma dW``.
    Works on a single state (d,) or on a batch (n, d).

    :param x: current state
    :param t: current time (kept for signature symmetry with the drift callables)
    :param dt: step size, must be positive
    :param drift: total drift ``b_t(x) + sigma_t u_t(x)`` evaluated at ``x``
    :param sigma: volatility matrix (d, d)
    :param dw: Brownian increment
    :param step: step index, reported on failure
    :return: the next state
    """
    if not dt > 0:
        raise ValueError(f"Step size must be positive, got {dt}")
    check_finite(x, "state", step)
    check_finite(drift, "drift", step)
    check_finite(dw, "Brownian increment", step)
    return x + drift * dt + dw @ sigma.T


def simulate_controlled(
    problem: "SocProblem",
    policy: "BasePolicy",
    grid: TimeGrid,
    wiener: WienerPath,
    store_states: bool = False,
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD,
    strict: bool = False,
    step_hook: Optional[StepHook] = None,
    keep_tape: bool = False,
) -> TrajectoryBatch:
    """
    Simulate all walkers of ``wiener`` under ``policy`` and accumulate the cost terms.

    :param problem: the control problem
    :param policy: the feedback control
    :param grid: time grid with K steps
    :param wiener: Brownian increments and initial noise, K steps
    :param store_states: keep the states at all K + 1 instants
    :param divergence_guard: walkers whose norm exceeds it are diverged
    :param strict: raise ``DivergedWalkersError`` instead of freezing and flagging diverged walkers
    :param step_hook: called at every step with a ``StepRecord``, before the state update
    :param keep_tape: evaluate the policy with a ``StepTape`` and hand it to ``step_hook``
    :return: the trajectory batch
    """
    n, n_steps, d = wiener.n_walkers, wiener.n_steps, wiener.dim
    if n_steps != grid.n_steps:
        raise ValueError(f"Wiener path has {n_steps} steps but the grid has {grid.n_steps}")
    if d != problem.dim:
        raise ValueError(f"Wiener path has dimension {d} but the problem has dimension {problem.dim}")
    if abs(grid.horizon - problem.horizon) > 1e-12 * max(1.0, problem.horizon):
        raise ValueError(f"Grid ends at {grid.horizon} but the problem horizon is {problem.horizon}")

    x = problem.initial_law.sample(wiener.initial_noise)
    initial = x
    zeros = th.zeros(n, dtype=DTYPE)
    acc_A, acc_Abar, acc_Bbar, acc_C = zeros.clone(), zeros.clone(), zeros.clone(), zeros.clone()
    active = th.ones(n, dtype=th.bool)
    frozen = False

    states = None
    if store_states:
        try:
            states = th.empty((n, n_steps + 1, d), dtype=DTYPE)
        except RuntimeError as error:
            raise MemoryError(f"Cannot store {n_steps + 1} states for {n} walkers in dimension {d}") from error
        states[:, 0] = x

    times = grid.times.tolist()
    steps = grid.steps().tolist()
    for k in range(n_steps):
        t, dt = times[k], steps[k]
        dw = wiener.increments[:, k]
        sigma = problem.volatility(t)
        u, tape = policy.evaluate(t, x, keep_tape=keep_tape)
        running = problem.running_cost(t, x)
        check_finite(running, "running cost", k)
        if step_hook is not None:
            step_hook(StepRecord(k, t, dt, x, u, dw, running, active, tape))

        drift = problem.base_drift(t, x) + u @ sigma.T
        x_next = euler_maruyama_step(x, t, dt, drift, sigma, dw, step=k)

        half_energy = 0.5 * (u * u).sum(dim=-1) * dt
        running_dt = running * dt
        noise_term = (u * dw).sum(dim=-1)
        if frozen:
            # Diverged walkers keep the values they had when they crossed the guard
            half_energy = th.where(active, half_energy, zeros)
            running_dt = th.where(active, running_dt, zeros)
            noise_term = th.where(active, noise_term, zeros)
        acc_A = acc_A + half_energy
        acc_Abar = acc_Abar + half_energy
        acc_Bbar = acc_Bbar + running_dt
        acc_C = acc_C + noise_term

        norms = th.linalg.vector_norm(x_next, dim=-1)
        crossed = (norms > divergence_guard) & active
        if bool(crossed.any()):
            walkers = th.nonzero(crossed).flatten().tolist()
            if strict:
                raise DivergedWalkersError(walkers, k, float(norms[crossed].max()), divergence_guard)
            active = active & ~crossed
            frozen = True
        if frozen:
            x_next = th.where(active.unsqueeze(-1), x_next, x)
        x = x_next
        if states is not None:
            states[:, k + 1] = x

    return TrajectoryBatch(
        acc_A=acc_A,
        acc_Abar=acc_Abar,
        acc_Bbar=acc_Bbar,
        acc_C=acc_C,
        initial=initial,
        terminal=x,
        active=active,
        wiener=wiener,
        grid=grid,
        states=states,
        stored_step_records=n_steps if store_states else 0,
    )
