from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

import torch as th
from torch.optim import Optimizer

from simfree_soc.common.utils import DTYPE, check_finite


@dataclass(eq=False)
class AdamState:
    """
    Moment estimates of the Adam optimizer for one flat parameter vector.

    :param size: number of parameters
    """

    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: th.Tensor = field(default=None)
    v: th.Tensor = field(default=None)

    def __post_init__(self) -> None:
        if self.m is None:
            self.m = th.zeros(self.size, dtype=DTYPE)
        if self.v is None:
            self.v = th.zeros(self.size, dtype=DTYPE)
        if tuple(self.m.shape) != (self.size,) or tuple(self.v.shape) != (self.size,):
            raise ValueError(f"Moment vectors must have shape ({self.size},)")


def adam_step(state: AdamState, params: th.Tensor, grad: th.Tensor, lr: float) -> th.Tensor:
    """
    One bias-corrected Adam update, in place on ``params`` and ``state``.
    Nothing is modified when ``grad`` is not finite.

    :param state: optimizer state
    :param params: flat parameter vector
    :param grad: gradient, same shape as ``params``
    :param lr: learning rate
    :return: the updated ``params``
    """
    if params.shape != grad.shape or tuple(params.shape) != (state.size,):
        raise ValueError(f"Shape mismatch: params {tuple(params.shape)}, grad {tuple(grad.shape)}, state ({state.size},)")
    check_finite(grad, "gradient")
    state.step += 1
    state.m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
    state.v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
    bias_correction1 = 1.0 - state.beta1**state.step
    bias_correction2 = 1.0 - state.beta2**state.step
    denom = (state.v / bias_correction2).sqrt_().add_(state.eps)
    params.addcdiv_(state.m, denom, value=-lr / bias_correction1)
    return params


class FlatAdam(Optimizer):
    r"""
    Adam on flat float64 parameter vectors, keeping its moments in ``AdamState`` records.
    Gradients are checked for non-finite entries before any state is touched.

    :params: iterable of parameters to optimize or dicts defining
        parameter groups
    :param lr: learning rate (default: 3e-4)
    :param betas: coefficients of the running averages (default: (0.9, 0.999))
    :param eps: term added to the denominator (default: 1e-8)
    """

    def __init__(self, params: Iterable[th.nn.Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if not 0.0 <= lr:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not 0.0 <= eps:
            raise ValueError(f"Invalid epsilon value: {eps}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"Invalid beta parameters: {betas}")
        defaults = dict(lr=lr, betas=betas, eps=eps)
        super().__init__(params, defaults)

    def adam_state(self, param: th.nn.Parameter) -> AdamState:
        group = next(group for group in self.param_groups if any(p is param for p in group["params"]))
        state = self.state[param]
        if "adam" not in state:
            beta1, beta2 = group["betas"]
            state["adam"] = AdamState(param.numel(), beta1=beta1, beta2=beta2, eps=group["eps"])
        return state["adam"]

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr

    @th.no_grad()
    def step(self, closure: Optional[Callable[[], Any]] = None) -> Optional[th.Tensor]:
        """Performs a single optimization step.

        :param closure: A closure that reevaluates the model
            and returns the loss.
        :return: loss
        """
        loss = None
        if closure is not None:
            with th.enable_grad():
                loss = closure()

        # Check everything first: a bad gradient leaves every parameter untouched
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None:
                    check_finite(p.grad, "gradient")

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None or p.numel() == 0:
                    continue
                adam_step(self.adam_state(p), p.view(-1), p.grad.view(-1).to(DTYPE), group["lr"])
        return loss

