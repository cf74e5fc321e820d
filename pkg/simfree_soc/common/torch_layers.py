"""
Fully connected layers over a flat parameter vector, with a hand-written reverse sweep.

A layer does not own its parameters: it owns slots in a ``ParamLayout`` and reads
its weights from the flat vector handed to ``forward``. The reverse sweep writes
parameter cotangents straight into a flat buffer, either summed over walkers
(shape (|theta|,)) or kept per walker (shape (n, |theta|)).
"""
import math
from collections import OrderedDict
from typing import Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch as th

from simfree_soc.common.utils import DTYPE


class Activation(NamedTuple):
    fn: Callable[[th.Tensor], th.Tensor]
    # Derivative expressed with the activation output y = fn(z)
    derivative: Callable[[th.Tensor], th.Tensor]


ACTIVATIONS: Dict[str, Activation] = {
    "tanh": Activation(th.tanh, lambda y: 1.0 - y * y),
    "relu": Activation(th.relu, lambda y: (y > 0).to(y.dtype)),
}


def get_activation(name: str) -> Activation:
    if name not in ACTIVATIONS:
        raise ValueError(f"Unknown activation '{name}', expected one of {sorted(ACTIVATIONS)}")
    return ACTIVATIONS[name]


class ParamSlot(NamedTuple):
    offset: int
    shape: Tuple[int, ...]

    @property
    def numel(self) -> int:
        return int(math.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.numel)


class ParamLayout:
    """
    Registry mapping tensor names (``layer.weight``, ``layer.bias``) to
    their offset and shape inside the flat parameter vector.
    Registration order fixes the layout, so it is stable across save/load.
    """

    def __init__(self) -> None:
        self._slots: "OrderedDict[str, ParamSlot]" = OrderedDict()
        self.size = 0

    def register(self, name: str, shape: Sequence[int]) -> ParamSlot:
        if name in self._slots:
            raise ValueError(f"Parameter '{name}' is already registered")
        slot = ParamSlot(self.size, tuple(int(s) for s in shape))
        self._slots[name] = slot
        self.size += slot.numel
        return slot

    def __getitem__(self, name: str) -> ParamSlot:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def view(self, flat: th.Tensor, name: str) -> th.Tensor:
        """View of tensor ``name`` inside ``flat`` (leading batch axes are kept)."""
        slot = self._slots[name]
        return flat[..., slot.slice].reshape(flat.shape[:-1] + slot.shape)

    def to_list(self) -> List[Dict[str, Any]]:
        return [{"name": name, "offset": slot.offset, "shape": list(slot.shape)} for name, slot in self._slots.items()]

    @classmethod
    def from_list(cls, entries: Sequence[Dict[str, Any]]) -> "ParamLayout":
        layout = cls()
        for entry in entries:
            slot = layout.register(entry["name"], entry["shape"])
            if slot.offset != entry["offset"]:
                raise ValueError(f"Inconsistent offset for '{entry['name']}': {entry['offset']} != {slot.offset}")
        return layout

    def diff(self, other: "ParamLayout") -> List[str]:
        """Human readable differences between two layouts (empty when they match)."""
        differences = []
        for name in self._slots:
            if name not in other:
                differences.append(f"'{name}' missing")
            elif self._slots[name] != other[name]:
                mine, theirs = self._slots[name], other[name]
                differences.append(
                    f"'{name}': shape {list(mine.shape)} at offset {mine.offset}"
                    f" vs shape {list(theirs.shape)} at offset {theirs.offset}"
                )
        for name in other:
            if name not in self._slots:
                differences.append(f"unexpected '{name}'")
        return differences

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ParamLayout) and not self.diff(other)


def fourier_encode(t: float, num_freqs: int, horizon: float = 1.0) -> th.Tensor:
    """
    Fourier features ``[sin(2 pi f t / T) for f in 1..F] + [cos(2 pi f t / T) for f in 1..F]``.

    :param t: time
    :param num_freqs: number of frequencies F
    :param horizon: T, time is normalized by it
    :return: tensor of shape (2 F,)
    """
    if num_freqs < 1:
        raise ValueError(f"num_freqs must be >= 1, got {num_freqs}")
    freqs = th.arange(1, num_freqs + 1, dtype=DTYPE)
    angles = 2.0 * math.pi * freqs * (t / horizon)
    return th.cat([th.sin(angles), th.cos(angles)])


class Linear:
    """
    Affine map ``y = x W^T + b`` reading ``W`` (out, in) and ``b`` (out,) from the flat vector.

    :param layout: layout in which the parameters are registered
    :param name: prefix of the parameter names
    :param in_features:
    :param out_features:
    :param bias: whether the layer has a bias
    """

    def __init__(self, layout: ParamLayout, name: str, in_features: int, out_features: int, bias: bool = True):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight_slot = layout.register(f"{name}.weight", (out_features, in_features))
        self.bias_slot = layout.register(f"{name}.bias", (out_features,)) if bias else None

    def weight(self, theta: th.Tensor) -> th.Tensor:
        return theta[self.weight_slot.slice].view(self.out_features, self.in_features)

    def forward(self, theta: th.Tensor, x: th.Tensor) -> th.Tensor:
        y = x @ self.weight(theta).T
        if self.bias_slot is not None:
            y = y + theta[self.bias_slot.slice]
        return y

    def backward(
        self,
        theta: th.Tensor,
        x: th.Tensor,
        grad_out: th.Tensor,
        out: Optional[th.Tensor] = None,
        per_walker: bool = False,
        input_grad: bool = True,
    ) -> Optional[th.Tensor]:
        """
        Reverse sweep through the layer.

        :param theta: flat parameters
        :param x: layer input (n, in)
        :param grad_out: cotangent of the output (n, out)
        :param out: flat buffer receiving the parameter cotangent, (|theta|,) or (n, |theta|)
        :param per_walker: keep one parameter cotangent per walker
        :param input_grad: also return the input cotangent
        :return: input cotangent (n, in), or None
        """
        if out is not None:
            if per_walker:
                n = x.shape[0]
                out[:, self.weight_slot.slice] += (grad_out.unsqueeze(2) * x.unsqueeze(1)).reshape(n, -1)
                if self.bias_slot is not None:
                    out[:, self.bias_slot.slice] += grad_out
            else:
                out[self.weight_slot.slice] += (grad_out.T @ x).reshape(-1)
                if self.bias_slot is not None:
                    out[self.bias_slot.slice] += grad_out.sum(dim=0)
        if input_grad:
            return grad_out @ self.weight(theta)
        return None

    def reset_parameters(self, theta: th.Tensor, rng: np.random.Generator, zero: bool = False) -> None:
        """
        Fan-in scaled uniform initialization: weights ``U(-sqrt(3 / fan_in), sqrt(3 / fan_in))``
        (variance ``1 / fan_in``), biases ``U(-1 / sqrt(fan_in), 1 / sqrt(fan_in))``.

        :param theta: flat parameters, modified in place
        :param rng: numpy generator
        :param zero: set weights and bias to zero instead
        """
        slots = [self.weight_slot] + ([self.bias_slot] if self.bias_slot is not None else [])
        if zero:
            for slot in slots:
                theta[slot.slice] = 0.0
            return
        fan_in = max(self.in_features, 1)
        weight_bound = math.sqrt(3.0 / fan_in)
        weights = rng.uniform(-weight_bound, weight_bound, self.weight_slot.numel)
        theta[self.weight_slot.slice] = th.as_tensor(weights, dtype=DTYPE)
        if self.bias_slot is not None:
            bias_bound = 1.0 / math.sqrt(fan_in)
            theta[self.bias_slot.slice] = th.as_tensor(rng.uniform(-bias_bound, bias_bound, self.bias_slot.numel), dtype=DTYPE)


# Per-layer record of one forward pass: the layer input and, for hidden layers, the activation output
MlpTape = List[Tuple[th.Tensor, Optional[th.Tensor]]]


class Mlp:
    """
    Multi layer perceptron: fully-connected layers each followed by the activation,
    plus a final linear layer without activation when ``output_dim > 0``.

    :param layout: layout in which the parameters are registered
    :param name: prefix of the parameter names
    :param input_dim: dimension of the input vector
    :param output_dim: dimension of the output (0 for a pure feature network)
    :param net_arch: number of units of each hidden layer
    :param activation: activation name (``tanh`` or ``relu``)
    :param bias: whether the layers have biases
    """

    def __init__(
        self,
        layout: ParamLayout,
        name: str,
        input_dim: int,
        output_dim: int,
        net_arch: Sequence[int],
        activation: str = "tanh",
        bias: bool = True,
    ):
        self.activation = get_activation(activation)
        self.layers: List[Linear] = []
        self.activated: List[bool] = []
        last_dim = input_dim
        for idx, width in enumerate(net_arch):
            if width < 1:
                raise ValueError(f"Layer widths must be positive, got {list(net_arch)}")
            self.layers.append(Linear(layout, f"{name}.{idx}", last_dim, width, bias))
            self.activated.append(True)
            last_dim = width
        if output_dim > 0:
            self.layers.append(Linear(layout, f"{name}.{len(net_arch)}", last_dim, output_dim, bias))
            self.activated.append(False)
            last_dim = output_dim
        if not self.layers:
            raise ValueError(f"Network '{name}' has no layer")
        self.input_dim = input_dim
        self.output_dim = last_dim

    @property
    def last_layer(self) -> Linear:
        return self.layers[-1]

    def forward(self, theta: th.Tensor, x: th.Tensor, tape: Optional[MlpTape] = None) -> th.Tensor:
        for layer, activated in zip(self.layers, self.activated):
            z = layer.forward(theta, x)
            y = self.activation.fn(z) if activated else z
            if tape is not None:
                tape.append((x, y if activated else None))
            x = y
        return x

    def backward(
        self,
        theta: th.Tensor,
        tape: MlpTape,
        grad_out: th.Tensor,
        out: Optional[th.Tensor] = None,
        per_walker: bool = False,
        input_grad: bool = False,
    ) -> Optional[th.Tensor]:
        grad = grad_out
        for idx in range(len(self.layers) - 1, -1, -1):
            layer_input, activation_output = tape[idx]
            if self.activated[idx]:
                grad = grad * self.activation.derivative(activation_output)
            grad = self.layers[idx].backward(theta, layer_input, grad, out, per_walker, input_grad=idx > 0 or input_grad)
        return grad

    def reset_parameters(self, theta: th.Tensor, rng: np.random.Generator, zero_last_layer: bool = False) -> None:
        for idx, layer in enumerate(self.layers):
            is_last = idx == len(self.layers) - 1
            layer.reset_parameters(theta, rng, zero=zero_last_layer and is_last)
