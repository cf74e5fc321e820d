"""Common aliases for type hints"""

from typing import Callable, List, NamedTuple, Optional, Union

import torch as th

from simfree_soc.common import callbacks

# Batched problem callables: time is a python float, states are (n, d) float64 tensors
DriftFn = Callable[[float, th.Tensor], th.Tensor]
DriftVjpFn = Callable[[float, th.Tensor, th.Tensor], th.Tensor]
VolatilityFn = Callable[[float], th.Tensor]
RunningCostFn = Callable[[float, th.Tensor], th.Tensor]
TerminalCostFn = Callable[[th.Tensor], th.Tensor]
ControlFn = Callable[[float, th.Tensor], th.Tensor]
MaybeCallback = Union[None, Callable, List[callbacks.BaseCallback], callbacks.BaseCallback]

# A schedule takes the current iteration as input and outputs a learning rate
Schedule = Callable[[int], float]


class GradEstimate(NamedTuple):
    grad: th.Tensor
    loss: float
    n_walkers: int
    weight_mean: float
    weight_var: float
    diverged_count: int
    stored_step_records: int
    # Value of the stopgrad surrogate loss, only set by the stopgrad path
    surrogate_loss: Optional[float] = None


class MetricsRow(NamedTuple):
    iteration: int
    wall_s: Optional[float]
    loss: float
    l2_err: Optional[float]
    grad_norm: float
    diverged: int
    lr: float
