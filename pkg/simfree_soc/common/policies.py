"""Policies: parameterized feedback controls u(t, x) and their vector-Jacobian products."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Type, Union

import numpy as np
import torch as th
from torch import nn

from simfree_soc.common.errors import CheckpointError
from simfree_soc.common.rng import INIT_POLICY_STREAM, philox_generator
from simfree_soc.common.torch_layers import Mlp, MlpTape, ParamLayout, fourier_encode
from simfree_soc.common.type_aliases import ControlFn
from simfree_soc.common.utils import DTYPE, autograd_vjp, check_finite

ScoreFn = Callable[[th.Tensor], th.Tensor]
ScoreVjpFn = Callable[[th.Tensor, th.Tensor], th.Tensor]

TIME_EMBEDDINGS = ("fourier", "raw", "none")


@dataclass(eq=False)
class StepTape:
    """
    Activations cached by one forward pass at ``(t, x)``, enough for one reverse sweep.
    A tape belongs to a single time step.
    """

    t: float
    x: th.Tensor
    caches: Dict[str, MlpTape] = field(default_factory=dict)
    values: Dict[str, th.Tensor] = field(default_factory=dict)

    def cache(self, name: str) -> MlpTape:
        self.caches[name] = []
        return self.caches[name]


def _as_batch(x: th.Tensor) -> Tuple[th.Tensor, bool]:
    if x.dim() == 1:
        return x.unsqueeze(0), True
    return x, False


class BasePolicy(nn.Module, ABC):
    """
    The base policy object: a feedback control ``u^theta(t, x)`` whose parameters
    live in one flat float64 vector ``theta`` described by ``layout``.

    Two evaluation modes are offered:
    ``forward`` is an ordinary torch computation (autograd flows to ``theta``),
    ``evaluate`` runs without autograd and optionally records a ``StepTape``
    that ``backward`` consumes to produce ``v^T d_theta u`` and ``v^T d_x u``.

    :param dim: state dimension d
    :param horizon: final time T, used to normalize time
    """

    def __init__(self, dim: int, horizon: float = 1.0):
        super().__init__()
        if dim < 1:
            raise ValueError(f"The dimension must be positive, got {dim}")
        if not horizon > 0:
            raise ValueError(f"The horizon must be positive, got {horizon}")
        self.dim = dim
        self.horizon = horizon
        self.layout = ParamLayout()
        self.theta = nn.Parameter(th.zeros(0, dtype=DTYPE))

    def _build(self, seed: int, zero_last_layer: bool) -> None:
        """Allocate the flat parameter vector once every layer is registered, then initialize it."""
        self.theta = nn.Parameter(th.zeros(self.layout.size, dtype=DTYPE))
        self.reset_parameters(seed, zero_last_layer)

    @property
    def n_params(self) -> int:
        return self.layout.size

    def reset_parameters(self, seed: int = 0, zero_last_layer: bool = False) -> None:
        """
        Re-initialize the parameters; the draws only depend on ``seed``.

        :param seed:
        :param zero_last_layer: zero the weights and biases of the output layers
        """
        rng = philox_generator(seed, INIT_POLICY_STREAM, 0, 0)
        with th.no_grad():
            self._reset_parameters(self.theta.data, rng, zero_last_layer)

    def _reset_parameters(self, theta: th.Tensor, rng: np.random.Generator, zero_last_layer: bool) -> None:
        pass

    @abstractmethod
    def _forward(self, theta: th.Tensor, t: float, x: th.Tensor, tape: Optional[StepTape]) -> th.Tensor:
        """Compute the control of a batch (n, d); record activations in ``tape`` when given."""

    @abstractmethod
    def _backward(
        self,
        theta: th.Tensor,
        tape: StepTape,
        v: th.Tensor,
        out: Optional[th.Tensor],
        per_walker: bool,
        input_grad: bool,
    ) -> Optional[th.Tensor]:
        """Reverse sweep of the pass recorded in ``tape``."""

    def forward(self, t: float, x: th.Tensor) -> th.Tensor:
        """
        Differentiable evaluation of the control.

        :param t: time
        :param x: state (d,) or batch (n, d)
        :return: the control, same shape as ``x``
        """
        batch, single = _as_batch(x)
        u = self._forward(self.theta, t, batch, None)
        return u[0] if single else u

    def evaluate(self, t: float, x: th.Tensor, keep_tape: bool = False) -> Tuple[th.Tensor, Optional[StepTape]]:
        """
        Evaluate the control without autograd.

        :param t: time
        :param x: batch of states (n, d)
        :param keep_tape: record the activations for a later ``backward``
        :return: the control (n, d) and the tape (None unless ``keep_tape``)
        """
        tape = StepTape(t, x) if keep_tape else None
        with th.no_grad():
            u = self._forward(self.theta.detach(), t, x, tape)
        check_finite(u, "control")
        return u, tape

    def backward(
        self,
        tape: StepTape,
        v: th.Tensor,
        out: Optional[th.Tensor] = None,
        per_walker: bool = False,
        input_grad: bool = False,
    ) -> Optional[th.Tensor]:
        """
        Reverse sweep of one recorded evaluation.

        :param tape: tape recorded by ``evaluate(..., keep_tape=True)``
        :param v: cotangent (n, d)
        :param out: buffer accumulating ``v^T d_theta u``, shape (|theta|,) summed over
            walkers or (n, |theta|) with ``per_walker``
        :param per_walker: keep the walkers' parameter cotangents apart
        :param input_grad: also compute ``v^T d_x u``
        :return: ``v^T d_x u`` (n, d) when ``input_grad``, else None
        """
        if tape is None:
            raise ValueError("backward needs the tape of an evaluation made with keep_tape=True")
        check_finite(v, "cotangent")
        if out is not None:
            expected = (tape.x.shape[0], self.n_params) if per_walker else (self.n_params,)
            if tuple(out.shape) != expected:
                raise ValueError(f"Gradient buffer has shape {tuple(out.shape)}, expected {expected}")
        with th.no_grad():
            return self._backward(self.theta.detach(), tape, v, out, per_walker, input_grad)

    def vjp_params(
        self,
        t: float,
        x: th.Tensor,
        v: th.Tensor,
        out: Optional[th.Tensor] = None,
        per_walker: bool = False,
    ) -> th.Tensor:
        """
        ``v^T d_theta u(t, x)``, summed over walkers unless ``per_walker``.
        When ``out`` is given the result is added to it.

        :param t: time
        :param x: state (d,) or batch (n, d)
        :param v: cotangent with the shape of ``x``
        :param out: optional accumulation buffer
        :param per_walker: return one flat vector per walker
        :return: the accumulated buffer
        """
        batch, _ = _as_batch(x)
        v, _ = _as_batch(v)
        if out is None:
            shape = (batch.shape[0], self.n_params) if per_walker else (self.n_params,)
            out = th.zeros(shape, dtype=DTYPE)
        _, tape = self.evaluate(t, batch, keep_tape=True)
        self.backward(tape, v, out, per_walker=per_walker)
        return out

    def vjp_input(self, t: float, x: th.Tensor, v: th.Tensor) -> th.Tensor:
        """
        ``v^T d_x u(t, x)`` for every walker.

        :param t: time
        :param x: state (d,) or batch (n, d)
        :param v: cotangent with the shape of ``x``
        :return: tensor with the shape of ``x``
        """
        batch, single = _as_batch(x)
        v, _ = _as_batch(v)
        _, tape = self.evaluate(t, batch, keep_tape=True)
        grad = self.backward(tape, v, input_grad=True)
        return grad[0] if single else grad

    def _time_features(self, t: float, n: int, embedding: str, num_freqs: int) -> Optional[th.Tensor]:
        if embedding == "fourier":
            return fourier_encode(t, num_freqs, self.horizon).expand(n, -1)
        if embedding == "raw":
            return th.full((n, 1), t / self.horizon, dtype=DTYPE)
        return None

    def _get_constructor_parameters(self) -> Dict[str, Any]:
        """
        Get data that need to be saved in order to re-create the policy when loading it from disk.

        :return: The dictionary to pass as kwargs to the constructor
        """
        return dict(dim=self.dim, horizon=self.horizon)

    def get_architecture(self) -> Dict[str, Any]:
        """Architecture record stored in checkpoint headers, understood by ``init_policy``."""
        return dict(policy=POLICY_NAMES[type(self)], **self._get_constructor_parameters())

    def parameters_to_vector(self) -> np.ndarray:
        """
        Convert the parameters to a 1D numpy array.

        :return:
        """
        return self.theta.detach().cpu().numpy().copy()

    def load_from_vector(self, vector: Union[np.ndarray, th.Tensor]) -> None:
        """
        Load parameters from a 1D vector.

        :param vector:
        """
        vector = th.as_tensor(vector, dtype=DTYPE)
        if tuple(vector.shape) != (self.n_params,):
            raise ValueError(f"Expected a parameter vector of length {self.n_params}, got shape {tuple(vector.shape)}")
        with th.no_grad():
            self.theta.copy_(vector)

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
        """
        Save the parameters to a checkpoint file.

        :param path:
        :param meta: free-form JSON serializable data stored in the header
        """
        from simfree_soc.common.save_util import save_params

        save_params(path, self.layout, self.theta.detach(), self.get_architecture(), meta)

    def load_checkpoint(self, path: str) -> Dict[str, Any]:
        """
        Load a checkpoint into this policy, checking that the layouts agree.

        :param path:
        :return: the checkpoint header
        """
        from simfree_soc.common.save_util import load_params

        header, params = load_params(path)
        differences = self.layout.diff(ParamLayout.from_list(header["layout"]))
        if differences:
            raise CheckpointError(f"Checkpoint {path} does not match the policy layout: " + "; ".join(differences))
        self.load_from_vector(params)
        return header

    @classmethod
    def load(cls, path: str, score_fn: Optional[ScoreFn] = None, score_vjp: Optional[ScoreVjpFn] = None) -> "BasePolicy":
        """
        Re-create a policy from a checkpoint.

        :param path:
        :param score_fn: score function, needed by score-augmented policies
        :param score_vjp: optional Hessian-vector product of the score
        :return: the policy
        """
        from simfree_soc.common.save_util import load_params

        header, _ = load_params(path)
        policy = init_policy(header["architecture"], score_fn=score_fn, score_vjp=score_vjp)
        policy.load_checkpoint(path)
        return policy


class MlpPolicy(BasePolicy):
    """
    Fully connected control network on ``(time features, x)``.

    :param dim: state dimension d
    :param horizon: final time T
    :param net_arch: units of each hidden layer (a final d-dimensional linear layer is added)
    :param activation: ``tanh`` or ``relu``
    :param time_embedding: ``fourier`` (sin/cos features of t / T), ``raw`` (t / T) or ``none``
    :param num_freqs: number of Fourier frequencies (2 * num_freqs features)
    :param bias: whether the layers have biases
    :param zero_last_layer: start from the zero control
    :param seed: initialization seed
    """

    def __init__(
        self,
        dim: int,
        horizon: float = 1.0,
        net_arch: Optional[Sequence[int]] = None,
        activation: str = "tanh",
        time_embedding: str = "fourier",
        num_freqs: int = 64,
        bias: bool = True,
        zero_last_layer: bool = False,
        seed: int = 0,
    ):
        super().__init__(dim, horizon)
        if net_arch is None:
            net_arch = [128, 128, 128]
        if time_embedding not in TIME_EMBEDDINGS:
            raise ValueError(f"Unknown time embedding '{time_embedding}', expected one of {TIME_EMBEDDINGS}")
        self.net_arch = list(net_arch)
        self.activation = activation
        self.time_embedding = time_embedding
        self.num_freqs = num_freqs
        self.bias = bias
        n_time = {"fourier": 2 * num_freqs, "raw": 1, "none": 0}[time_embedding]
        self.net = Mlp(self.layout, "net", n_time + dim, dim, self.net_arch, activation, bias)
        self._build(seed, zero_last_layer)

    def _reset_parameters(self, theta: th.Tensor, rng: np.random.Generator, zero_last_layer: bool) -> None:
        self.net.reset_parameters(theta, rng, zero_last_layer)

    def _forward(self, theta: th.Tensor, t: float, x: th.Tensor, tape: Optional[StepTape]) -> th.Tensor:
        time_features = self._time_features(t, x.shape[0], self.time_embedding, self.num_freqs)
        net_input = x if time_features is None else th.cat([time_features, x], dim=-1)
        return self.net.forward(theta, net_input, None if tape is None else tape.cache("net"))

    def _backward(self, theta, tape, v, out, per_walker, input_grad):
        grad = self.net.backward(theta, tape.caches["net"], v, out, per_walker, input_grad)
        if not input_grad:
            return None
        return grad[:, -self.dim :]

    def _get_constructor_parameters(self) -> Dict[str, Any]:
        data = super()._get_constructor_parameters()
        data.update(
            dict(
                net_arch=self.net_arch,
                activation=self.activation,
                time_embedding=self.time_embedding,
                num_freqs=self.num_freqs,
                bias=self.bias,
            )
        )
        return data


class PisPolicy(BasePolicy):
    """
    Score-augmented control ``u(t, x) = NN1(t, x) + NN2(t) * score(x)``.

    ``NN1`` concatenates a time feature network (on Fourier features) and a state
    feature network, followed by a head; ``NN2`` is a gate network on the Fourier
    features producing a d-vector (or a scalar).

    :param dim: state dimension d
    :param score_fn: ``x -> grad log rho(x)``, batched
    :param score_vjp: ``(x, v) -> v^T d_x score(x)``; autograd is used when missing
    :param horizon: final time T
    :param t_arch: hidden units of the time feature network
    :param x_arch: hidden units of the state feature network
    :param head_arch: hidden units of the head (a final d-dimensional linear layer is added)
    :param gate_arch: hidden units of the gate network
    :param scalar_gate: gate with one output shared by all coordinates
    :param activation: ``tanh`` or ``relu``
    :param num_freqs: number of Fourier frequencies
    :param zero_last_layer: zero the last layers of the head and the gate, so that ``u = 0``
    :param seed: initialization seed
    :param score_name: name of the score function, stored in checkpoints
    """

    def __init__(
        self,
        dim: int,
        score_fn: ScoreFn,
        score_vjp: Optional[ScoreVjpFn] = None,
        horizon: float = 1.0,
        t_arch: Sequence[int] = (64, 64),
        x_arch: Sequence[int] = (64, 64),
        head_arch: Sequence[int] = (64, 64),
        gate_arch: Sequence[int] = (64, 64),
        scalar_gate: bool = False,
        activation: str = "tanh",
        num_freqs: int = 64,
        zero_last_layer: bool = True,
        seed: int = 0,
        score_name: str = "custom",
    ):
        super().__init__(dim, horizon)
        if len(t_arch) == 0 or len(x_arch) == 0:
            raise ValueError("The time and state feature networks need at least one hidden layer")
        self.score_fn = score_fn
        self.score_vjp = score_vjp
        self.t_arch, self.x_arch = list(t_arch), list(x_arch)
        self.head_arch, self.gate_arch = list(head_arch), list(gate_arch)
        self.scalar_gate = scalar_gate
        self.activation = activation
        self.num_freqs = num_freqs
        self.score_name = score_name
        self.t_net = Mlp(self.layout, "t_net", 2 * num_freqs, 0, self.t_arch, activation)
        self.x_net = Mlp(self.layout, "x_net", dim, 0, self.x_arch, activation)
        self.head = Mlp(self.layout, "head", self.t_net.output_dim + self.x_net.output_dim, dim, self.head_arch, activation)
        self.gate_net = Mlp(self.layout, "gate_net", 2 * num_freqs, 1 if scalar_gate else dim, self.gate_arch, activation)
        self._build(seed, zero_last_layer)

    def _reset_parameters(self, theta: th.Tensor, rng: np.random.Generator, zero_last_layer: bool) -> None:
        self.t_net.reset_parameters(theta, rng)
        self.x_net.reset_parameters(theta, rng)
        self.head.reset_parameters(theta, rng, zero_last_layer)
        self.gate_net.reset_parameters(theta, rng, zero_last_layer)

    def _parts(
        self, theta: th.Tensor, t: float, x: th.Tensor, tape: Optional[StepTape]
    ) -> Tuple[th.Tensor, th.Tensor, th.Tensor]:
        def cache(name: str) -> Optional[MlpTape]:
            return None if tape is None else tape.cache(name)

        time_features = self._time_features(t, x.shape[0], "fourier", self.num_freqs)
        t_features = self.t_net.forward(theta, time_features, cache("t_net"))
        x_features = self.x_net.forward(theta, x, cache("x_net"))
        nn1 = self.head.forward(theta, th.cat([t_features, x_features], dim=-1), cache("head"))
        gate = self.gate_net.forward(theta, time_features, cache("gate_net"))
        with th.no_grad():
            score = self.score_fn(x.detach())
        if tape is not None:
            tape.values["gate"] = gate
            tape.values["score"] = score
        return nn1, gate, score

    def decompose(self, t: float, x: th.Tensor) -> Tuple[th.Tensor, th.Tensor, th.Tensor]:
        """
        :return: ``NN1(t, x)``, ``NN2(t)`` and ``score(x)`` for a batch of states
        """
        with th.no_grad():
            return self._parts(self.theta.detach(), t, x, None)

    def _forward(self, theta: th.Tensor, t: float, x: th.Tensor, tape: Optional[StepTape]) -> th.Tensor:
        nn1, gate, score = self._parts(theta, t, x, tape)
        return nn1 + gate * score

    def _backward(self, theta, tape, v, out, per_walker, input_grad):
        score, gate = tape.values["score"], tape.values["gate"]
        grad_features = self.head.backward(theta, tape.caches["head"], v, out, per_walker, input_grad=True)
        n_t = self.t_net.output_dim
        self.t_net.backward(theta, tape.caches["t_net"], grad_features[:, :n_t], out, per_walker)
        grad_x = self.x_net.backward(theta, tape.caches["x_net"], grad_features[:, n_t:], out, per_walker, input_grad)
        grad_gate = v * score
        if self.scalar_gate:
            grad_gate = grad_gate.sum(dim=-1, keepdim=True)
        self.gate_net.backward(theta, tape.caches["gate_net"], grad_gate, out, per_walker)
        if not input_grad:
            return None
        weighted = v * gate
        if self.score_vjp is not None:
            score_term = self.score_vjp(tape.x, weighted)
        else:
            score_term = autograd_vjp(self.score_fn, tape.x, v=weighted)
        return grad_x + score_term

    def _get_constructor_parameters(self) -> Dict[str, Any]:
        data = super()._get_constructor_parameters()
        data.update(
            dict(
                t_arch=self.t_arch,
                x_arch=self.x_arch,
                head_arch=self.head_arch,
                gate_arch=self.gate_arch,
                scalar_gate=self.scalar_gate,
                activation=self.activation,
                num_freqs=self.num_freqs,
                score_name=self.score_name,
            )
        )
        return data


class FunctionPolicy(BasePolicy):
    """
    Control given by a function, without parameters (analytic optimal controls, constants).

    :param control_fn: ``(t, x) -> u``, batched
    :param dim: state dimension d
    :param horizon: final time T
    :param input_vjp: ``(t, x, v) -> v^T d_x u``; autograd is used when missing
    """

    def __init__(
        self,
        control_fn: ControlFn,
        dim: int,
        horizon: float = 1.0,
        input_vjp: Optional[Callable[[float, th.Tensor, th.Tensor], th.Tensor]] = None,
    ):
        super().__init__(dim, horizon)
        self.control_fn = control_fn
        self.input_vjp = input_vjp

    @classmethod
    def constant(cls, value: Union[float, Sequence[float], th.Tensor], dim: int, horizon: float = 1.0) -> "FunctionPolicy":
        c = th.as_tensor(value, dtype=DTYPE).expand(dim).clone()

        def control(t: float, x: th.Tensor) -> th.Tensor:
            return c.expand(x.shape[0], dim).clone()

        def input_vjp(t: float, x: th.Tensor, v: th.Tensor) -> th.Tensor:
            return th.zeros_like(x)

        return cls(control, dim, horizon, input_vjp)

    @classmethod
    def zero(cls, dim: int, horizon: float = 1.0) -> "FunctionPolicy":
        return cls.constant(0.0, dim, horizon)

    def _forward(self, theta: th.Tensor, t: float, x: th.Tensor, tape: Optional[StepTape]) -> th.Tensor:
        return self.control_fn(t, x)

    def _backward(self, theta, tape, v, out, per_walker, input_grad):
        if not input_grad:
            return None
        if self.input_vjp is not None:
            return self.input_vjp(tape.t, tape.x, v)
        return autograd_vjp(self.control_fn, tape.t, tape.x, v=v)

    def get_architecture(self) -> Dict[str, Any]:
        return dict(policy="function", dim=self.dim, horizon=self.horizon)


POLICY_NAMES: Dict[Type[BasePolicy], str] = {MlpPolicy: "mlp", PisPolicy: "pis", FunctionPolicy: "function"}


def init_policy(
    architecture: Dict[str, Any],
    seed: int = 0,
    zero_last_layer: Optional[bool] = None,
    score_fn: Optional[ScoreFn] = None,
    score_vjp: Optional[ScoreVjpFn] = None,
) -> BasePolicy:
    """
    Build a policy from an architecture record (as returned by ``get_architecture``).

    :param architecture: ``{"policy": "mlp" | "pis", ...constructor arguments}``
    :param seed: initialization seed
    :param zero_last_layer: override the policy's default
    :param score_fn: score function for ``pis`` policies
    :param score_vjp: Hessian-vector product of the score for ``pis`` policies
    :return: the policy
    """
    kwargs = dict(architecture)
    name = kwargs.pop("policy", None)
    kwargs["seed"] = seed
    if zero_last_layer is not None:
        kwargs["zero_last_layer"] = zero_last_layer
    if name == "mlp":
        return MlpPolicy(**kwargs)
    if name == "pis":
        if score_fn is None:
            raise ValueError("A 'pis' policy needs a score function")
        return PisPolicy(score_fn=score_fn, score_vjp=score_vjp, **kwargs)
    raise ValueError(f"Cannot build a policy of type '{name}', expected 'mlp' or 'pis'")
