"""Training loop: fresh grid and noise every iteration, a gradient estimate, one Adam step."""
import math
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import torch as th

from simfree_soc.common.callbacks import (
    BaseCallback,
    CallbackList,
    CheckpointCallback,
    ConvertCallback,
    StopTrainingOnLossPlateau,
)
from simfree_soc.common.errors import NumericalError
from simfree_soc.common.evaluation import L2_ERROR_WALKERS, l2_error
from simfree_soc.common.logger import Logger
from simfree_soc.common.optim import FlatAdam
from simfree_soc.common.policies import BasePolicy
from simfree_soc.common.rng import WalkerStreams
from simfree_soc.common.sde import DEFAULT_DIVERGENCE_GUARD, GRID_MODES, make_randomized_grid, sample_wiener_increments
from simfree_soc.common.type_aliases import GradEstimate, MaybeCallback, MetricsRow, Schedule
from simfree_soc.common.utils import configure_logger, get_cosine_fn, set_num_threads, set_random_seed
from simfree_soc.estimators.simfree import ACCUMULATIONS, PATHS, simfree_gradient
from simfree_soc.estimators.vanilla import vanilla_gradient
from simfree_soc.problems.base import SocProblem

TRAIN_ESTIMATORS = ("simfree", "vanilla")
METRICS_COLUMNS = ("iter", "wall_s", "loss", "l2_err", "grad_norm", "diverged", "lr")


@dataclass
class TrainConfig:
    """
    Settings of a training run.

    :param learning_rate: initial learning rate of the cosine schedule
    :param iterations: number of optimizer iterations
    :param n_walkers: walkers per iteration
    :param n_steps: time steps per trajectory
    :param grid_mode: ``randomized`` (fresh sorted uniform interior points every iteration) or ``uniform``
    :param seed: master seed of the random streams
    :param estimator: ``simfree`` or ``vanilla``
    :param path: simfree path, ``direct`` or ``stopgrad``
    :param accumulation: simfree accumulation, ``auto``, ``per_walker`` or ``replay``
    :param eval_every: write a metrics row every ``eval_every`` iterations
    :param lr_floor: final learning rate of the cosine schedule
    :param checkpoint_every: save ``ckpt_{iter}.bin`` every ``checkpoint_every`` iterations (0: never)
    :param deterministic: fixed-topology reductions; ``wall_s`` is left empty so runs compare bitwise
    :param strict: abort on the first diverged walker
    :param threads: worker threads, 0 for one per core
    :param divergence_guard: norm beyond which a walker is diverged
    :param l2_walkers: trajectories of the L2 control error
    :param early_stop: stop when the loss plateaus
    :param plateau_window: window of the plateau test
    :param plateau_tol: smallest relative improvement of the plateau test
    :param warm_start: checkpoint loaded into the policy before training
    """

    learning_rate: float = 3e-4
    iterations: int = 1000
    n_walkers: int = 1000
    n_steps: int = 64
    grid_mode: str = "randomized"
    seed: int = 0
    estimator: str = "simfree"
    path: str = "direct"
    accumulation: str = "auto"
    eval_every: int = 1
    lr_floor: float = 0.0
    checkpoint_every: int = 0
    deterministic: bool = False
    strict: bool = False
    threads: int = 1
    divergence_guard: float = DEFAULT_DIVERGENCE_GUARD
    l2_walkers: int = L2_ERROR_WALKERS
    early_stop: bool = False
    plateau_window: int = 100
    plateau_tol: float = 1e-4
    warm_start: Optional[str] = None

    def __post_init__(self) -> None:
        if self.estimator == "offpolicy":
            raise ValueError("The off-policy estimator provides an objective only, train with 'simfree' or 'vanilla'")
        if self.estimator not in TRAIN_ESTIMATORS:
            raise ValueError(f"Unknown estimator '{self.estimator}', expected one of {TRAIN_ESTIMATORS}")
        if self.path not in PATHS:
            raise ValueError(f"Unknown simfree path '{self.path}', expected one of {PATHS}")
        if self.accumulation not in ACCUMULATIONS:
            raise ValueError(f"Unknown accumulation '{self.accumulation}', expected one of {ACCUMULATIONS}")
        if self.grid_mode not in GRID_MODES:
            raise ValueError(f"Unknown grid mode '{self.grid_mode}', expected one of {GRID_MODES}")
        for name in ("n_walkers", "n_steps", "eval_every", "l2_walkers", "plateau_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("iterations", "checkpoint_every", "threads", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.lr_floor <= self.learning_rate:
            raise ValueError(f"lr_floor must lie in [0, learning_rate], got {self.lr_floor}")
        if not self.divergence_guard > 0:
            raise ValueError(f"divergence_guard must be positive, got {self.divergence_guard}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class SocSolver:
    """
    Trains a policy on a stochastic optimal control problem with Adam and cosine annealing.

    :param problem: the control problem
    :param policy: the policy to train, updated in place
    :param config: training settings
    :param logger: metrics logger; by default ``metrics.csv`` is written to ``log_dir`` when given
    :param log_dir: folder of the metrics files when no logger is passed
    :param verbose: Verbosity level: 0 for no output, 1 for info messages, 2 for debug messages
    """

    def __init__(
        self,
        problem: SocProblem,
        policy: BasePolicy,
        config: Optional[TrainConfig] = None,
        logger: Optional[Logger] = None,
        log_dir: Optional[str] = None,
        verbose: int = 0,
    ):
        self.problem = problem
        self.policy = policy
        self.config = config if config is not None else TrainConfig()
        self.verbose = verbose
        if policy.dim != problem.dim:
            raise ValueError(f"Policy dimension {policy.dim} does not match the problem dimension {problem.dim}")
        if abs(policy.horizon - problem.horizon) > 1e-12 * max(1.0, problem.horizon):
            raise ValueError(f"Policy horizon {policy.horizon} does not match the problem horizon {problem.horizon}")
        self._logger = logger if logger is not None else configure_logger(verbose, log_dir, extra_formats=("csv",))
        self.log_dir = log_dir
        self.streams = WalkerStreams(self.config.seed)
        self.lr_schedule = None  # type: Optional[Schedule]
        self.optimizer = FlatAdam(self.policy.parameters(), lr=self.config.learning_rate)
        self.num_iterations = 0
        self.metrics = []  # type: List[MetricsRow]
        self.last_estimate = None  # type: Optional[GradEstimate]
        self.threads = 1
        if self.config.warm_start is not None:
            header = self.policy.load_checkpoint(self.config.warm_start)
            iteration = header.get("meta", {}).get("iteration", "?")
            self.logger.info(f"Warm start from {self.config.warm_start} (iteration {iteration})")

    @property
    def logger(self) -> Logger:
        """Getter for the logger object."""
        return self._logger

    def set_logger(self, logger: Logger) -> None:
        self._logger = logger

    def _setup_lr_schedule(self) -> None:
        self.lr_schedule = get_cosine_fn(self.config.learning_rate, max(self.config.iterations, 1), self.config.lr_floor)

    def _init_callback(self, callback: MaybeCallback) -> BaseCallback:
        # Convert a list of callbacks into a callback
        if isinstance(callback, list):
            callback = CallbackList(callback)

        # Convert functional callback to object
        if not isinstance(callback, BaseCallback):
            callback = ConvertCallback(callback)

        extra = []
        if self.config.checkpoint_every > 0 and self.log_dir is not None:
            extra.append(CheckpointCallback(self.config.checkpoint_every, self.log_dir, verbose=self.verbose))
        if self.config.early_stop:
            extra.append(StopTrainingOnLossPlateau(self.config.plateau_window, self.config.plateau_tol, verbose=self.verbose))
        if extra:
            callback = CallbackList([callback] + extra)

        callback.init_callback(self)
        return callback

    def _setup_learn(self, callback: MaybeCallback) -> BaseCallback:
        set_random_seed(self.config.seed)
        self.threads = set_num_threads(self.config.threads)
        self._setup_lr_schedule()
        self.start_time = time.perf_counter()
        return self._init_callback(callback)

    def estimate(self, iteration: int) -> GradEstimate:
        """
        Draw the grid and the noise of ``iteration`` and estimate the gradient at the current parameters.
        """
        config = self.config
        streams = self.streams.for_iteration(iteration)
        grid = make_randomized_grid(config.n_steps, self.problem.horizon, streams.grid(), config.grid_mode)
        wiener = sample_wiener_increments(grid, config.n_walkers, self.problem.dim, streams, threads=self.threads)
        kwargs = dict(deterministic=config.deterministic, strict=config.strict, divergence_guard=config.divergence_guard)
        if config.estimator == "vanilla":
            return vanilla_gradient(self.problem, self.policy, grid, wiener, **kwargs)
        return simfree_gradient(
            self.problem, self.policy, grid, wiener, path=config.path, accumulation=config.accumulation, **kwargs
        )

    def control_error(self) -> Optional[float]:
        """Squared L2 distance to the analytic control, None when the problem has none."""
        if self.problem.optimal_control is None:
            return None
        return l2_error(
            self.problem,
            self.policy,
            n=self.config.l2_walkers,
            n_steps=self.config.n_steps,
            seed=self.config.seed,
            threads=self.threads,
        )

    def _record(self, row: MetricsRow) -> None:
        self.metrics.append(row)
        self.logger.record_dict(dict(zip(METRICS_COLUMNS, row)))
        self.logger.dump(step=row.iteration)

    def train(self, iteration: int) -> GradEstimate:
        """
        One optimizer iteration: estimate, Adam step at the scheduled learning rate.
        A metrics row describes the parameters the gradient was taken at.
        """
        lr = self.lr_schedule(iteration)
        log_row = iteration % self.config.eval_every == 0
        l2_err = self.control_error() if log_row else None

        estimate = self.estimate(iteration)
        if not math.isfinite(estimate.loss):
            raise NumericalError(f"Non-finite loss {estimate.loss} at iteration {iteration}")
        self.policy.theta.grad = estimate.grad.to(self.policy.theta.dtype).clone()
        self.optimizer.set_lr(lr)
        self.optimizer.step()
        self.policy.theta.grad = None
        self.last_estimate = estimate

        if log_row:
            wall_s = None if self.config.deterministic else time.perf_counter() - self.start_time
            grad_norm = float(th.linalg.vector_norm(estimate.grad))
            self._record(MetricsRow(iteration, wall_s, estimate.loss, l2_err, grad_norm, estimate.diverged_count, lr))
        if estimate.diverged_count > 0:
            self.logger.warn(f"Iteration {iteration}: {estimate.diverged_count} diverged walkers excluded")
        return estimate

    def learn(self, callback: MaybeCallback = None) -> "SocSolver":
        """
        Run ``config.iterations`` optimizer iterations.
        On a numerical failure the exception propagates and already written checkpoints are kept.

        :param callback: callback(s) called after every iteration
        :return: the trained solver
        """
        callback = self._setup_learn(callback)
        callback.on_training_start(locals(), globals())

        for iteration in range(self.num_iterations, self.config.iterations):
            self.train(iteration)
            self.num_iterations = iteration + 1
            callback.update_locals(locals())
            if callback.on_step() is False:
                self.logger.info(f"Training stopped by a callback after {self.num_iterations} iterations")
                break

        callback.on_training_end()
        return self

    def save(self, path: str) -> None:
        """Save the policy parameters with the iteration count and the problem name."""
        meta = {"iteration": self.num_iterations, "problem": self.problem.name, "seed": self.config.seed}
        self.policy.save(path, meta=meta)


def train_loop(
    problem: SocProblem,
    policy: BasePolicy,
    config: TrainConfig,
    logger: Optional[Logger] = None,
    log_dir: Optional[str] = None,
    callback: MaybeCallback = None,
    verbose: int = 0,
) -> Tuple[BasePolicy, List[MetricsRow]]:
    """
    Train ``policy`` on ``problem``.

    :param problem: the control problem
    :param policy: the policy, updated in place
    :param config: training settings
    :param logger: metrics logger
    :param log_dir: folder of metrics and checkpoints
    :param callback: callback(s) called after every iteration
    :param verbose: verbosity level
    :return: the trained policy and the metrics rows
    """
    solver = SocSolver(problem, policy, config, logger=logger, log_dir=log_dir, verbose=verbose)
    solver.learn(callback)
    return solver.policy, solver.metrics
