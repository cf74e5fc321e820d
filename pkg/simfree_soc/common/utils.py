import math
import os
import platform
import random
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
import torch as th

import simfree_soc
from simfree_soc.common.errors import NumericalError
from simfree_soc.common.logger import Logger, configure
from simfree_soc.common.type_aliases import Schedule

DTYPE = th.float64


def set_random_seed(seed: int, deterministic: bool = False) -> None:
    """
    Seed the global random generators.
    Simulation noise does not depend on them (see ``simfree_soc.common.rng``),
    they only matter for code that draws from the global state.

    :param seed:
    :param deterministic: also ask torch for deterministic kernels
    """
    random.seed(seed)
    np.random.seed(seed)
    th.manual_seed(seed)
    if deterministic:
        th.use_deterministic_algorithms(True)


def set_num_threads(threads: int) -> int:
    """
    Set the number of intra-op threads used by torch.

    :param threads: worker thread count, 0 means one per available core
    :return: the number of threads in use
    """
    if threads < 0:
        raise ValueError(f"threads must be >= 0, got {threads}")
    if threads == 0:
        threads = os.cpu_count() or 1
    th.set_num_threads(threads)
    return threads


def cosine_lr(iteration: int, total: int, lr0: float, floor: float = 0.0) -> float:
    """
    Cosine annealing from ``lr0`` at iteration 0 down to ``floor`` at ``total``.

    :param iteration: current iteration, ``0 <= iteration <= total``
    :param total: total number of iterations
    :param lr0: initial learning rate
    :param floor: final learning rate
    :return: the learning rate for this iteration
    """
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration must lie in [0, {total}], got {iteration}")
    if total == 0:
        return lr0
    return floor + 0.5 * (lr0 - floor) * (1.0 + math.cos(math.pi * iteration / total))


def get_cosine_fn(lr0: float, total: int, floor: float = 0.0) -> Schedule:
    """
    Create a cosine annealing schedule.

    :param lr0: initial learning rate
    :param total: number of iterations of the schedule
    :param floor: learning rate reached at the end of the schedule
    :return: schedule function mapping the iteration to the learning rate
    """

    def func(iteration: int) -> float:
        return cosine_lr(min(iteration, total), total, lr0, floor)

    return func


def tree_sum(values: th.Tensor, dim: int = 0) -> th.Tensor:
    """
    Sum along ``dim`` with a pairwise reduction whose topology only depends on the length.
    The result is bitwise reproducible for a given input, whatever the thread count.

    :param values: tensor to reduce
    :param dim: dimension to reduce
    :return: the reduced tensor
    """
    values = values.movedim(dim, 0)
    if values.shape[0] == 0:
        return th.zeros(values.shape[1:], dtype=values.dtype)
    while values.shape[0] > 1:
        if values.shape[0] % 2 == 1:
            values = th.cat([values, th.zeros_like(values[:1])], dim=0)
        values = values[0::2] + values[1::2]
    return values[0]


def walker_weights(active: th.Tensor, quadrature: Optional[th.Tensor] = None) -> th.Tensor:
    """
    Averaging weights over walkers: uniform over the active walkers,
    or the normalized quadrature weights restricted to them.

    :param active: boolean mask of the walkers to keep
    :param quadrature: optional per-walker weights (e.g. Gauss-Hermite)
    :return: nonnegative weights summing to one, zero for excluded walkers
    """
    n_active = int(active.sum())
    if n_active == 0:
        raise NumericalError("every walker diverged, nothing left to average")
    if quadrature is None:
        return active.to(DTYPE) / n_active
    if quadrature.shape != active.shape:
        raise ValueError(f"walker_weights has shape {tuple(quadrature.shape)}, expected {tuple(active.shape)}")
    weights = th.where(active, quadrature.to(DTYPE), th.zeros((), dtype=DTYPE))
    return weights / weights.sum()


def weighted_sum(values: th.Tensor, weights: th.Tensor, deterministic: bool = False) -> th.Tensor:
    """
    ``sum_i weights[i] * values[i]`` over the leading (walker) axis.

    :param values: tensor of shape (n, ...)
    :param weights: tensor of shape (n,)
    :param deterministic: use the fixed-topology tree reduction
    :return: the weighted sum
    """
    weighted = values * weights.reshape((-1,) + (1,) * (values.dim() - 1))
    if deterministic:
        return tree_sum(weighted, dim=0)
    return weighted.sum(dim=0)


def weighted_moments(values: th.Tensor, weights: th.Tensor, deterministic: bool = False) -> Tuple[float, float]:
    """
    Weighted mean and variance of per-walker scalars.

    :param values: tensor of shape (n,)
    :param weights: averaging weights summing to one
    :param deterministic: use the fixed-topology tree reduction
    :return: mean and variance
    """
    mean = weighted_sum(values, weights, deterministic)
    var = weighted_sum((values - mean) ** 2, weights, deterministic)
    return float(mean), float(var)


def check_finite(value: th.Tensor, name: str, step: Optional[int] = None) -> None:
    """
    Raise a ``NumericalError`` naming the first walker with a non-finite entry.

    :param value: tensor with walkers on the leading axis (or a single state)
    :param name: name of the checked quantity, used in the message
    :param step: time step index, if any
    """
    finite = th.isfinite(value)
    if bool(finite.all()):
        return
    walker = None
    if value.dim() >= 2:
        bad_rows = (~finite).reshape(value.shape[0], -1).any(dim=1)
        walker = int(th.nonzero(bad_rows)[0, 0])
    raise NumericalError(f"non-finite {name}", walker=walker, step=step)


def autograd_vjp(fn: Callable[..., th.Tensor], *args: th.Tensor, v: th.Tensor) -> th.Tensor:
    """
    Vector-Jacobian product of a batched function with respect to its last argument,
    computed with torch autograd. Used when a problem does not provide closed-form derivatives.

    :param fn: function whose output is (n, d) or (n,)
    :param args: leading arguments followed by the (n, d) state
    :param v: cotangent with the shape of ``fn``'s output
    :return: tensor of the shape of the last argument
    """
    *head, x = args
    with th.enable_grad():
        x = x.detach().requires_grad_(True)
        out = fn(*head, x)
        if not out.requires_grad:
            return th.zeros_like(x).detach()
        (grad,) = th.autograd.grad(out, x, grad_outputs=v, allow_unused=True)
    if grad is None:
        return th.zeros_like(x).detach()
    return grad.detach()


def configure_logger(verbose: int = 0, log_dir: Optional[str] = None, extra_formats: Iterable[str] = ()) -> Logger:
    """
    Configure the logger's outputs.

    :param verbose: the verbosity level: 0 no output, 1 info, 2 debug
    :param log_dir: folder for file outputs (metrics.csv, ...); None for stdout only
    :param extra_formats: file formats written to ``log_dir``, e.g. ``("csv", "json")``
    :return: The logger object
    """
    format_strings = ["stdout"] if verbose >= 1 else []
    if log_dir is not None:
        format_strings += list(extra_formats)
    logger = configure(log_dir, format_strings=format_strings)
    if verbose >= 2:
        logger.set_level(10)
    return logger


def get_system_info(print_info: bool = True) -> Tuple[Dict[str, str], str]:
    """
    Retrieve system and python env info for the current system.

    :param print_info: Whether to print or not those infos
    :return: Dictionary summing up the version for each relevant package
        and a formatted string.
    """
    env_info = {
        "OS": f"{platform.platform()} {platform.version()}",
        "Python": platform.python_version(),
        "simfree-soc": simfree_soc.__version__,
        "PyTorch": th.__version__,
        "Threads": str(th.get_num_threads()),
        "Numpy": np.__version__,
    }
    env_info_str = ""
    for key, value in env_info.items():
        env_info_str += f"{key}: {value}\n"
    if print_info:
        print(env_info_str)
    return env_info, env_info_str
