"""
Statistics of importance-weighted samples. Weights are handled in log space:
raw weights are only formed after subtracting the largest log weight.
"""
import json
import math
import pathlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np
import pandas as pd
import torch as th

from simfree_soc.common.utils import check_finite

TestFunction = Callable[[th.Tensor], th.Tensor]


@dataclass(frozen=True, eq=False)
class WeightedSampleSet:
    """
    Terminal samples with their log importance weights.

    :param samples: states, shape (n, d)
    :param log_weights: log weights, shape (n,)
    :param meta: problem name, seed, checkpoint, ...
    """

    samples: th.Tensor
    log_weights: th.Tensor
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.samples.dim() != 2 or self.log_weights.shape != (self.samples.shape[0],):
            raise ValueError(
                f"Samples {tuple(self.samples.shape)} and log weights {tuple(self.log_weights.shape)} do not match"
            )
        check_finite(self.log_weights, "log weight")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def relative_weights(self) -> Tuple[th.Tensor, float]:
        """
        :return: ``exp(log_w - max log_w)`` and the subtracted maximum
        """
        shift = float(self.log_weights.max())
        return th.exp(self.log_weights - shift), shift


def log_z_estimate(ws: WeightedSampleSet) -> Tuple[float, float]:
    """
    ``log mean_i w_i`` and its delta-method standard error ``sd(w) / (sqrt(n) mean(w))``.

    :param ws: weighted samples, at least two
    :return: log Z estimate and standard error
    """
    if ws.n < 2:
        raise ValueError(f"Need at least two samples to estimate log Z, got {ws.n}")
    weights, shift = ws.relative_weights()
    mean = weights.mean()
    log_z = shift + math.log(float(mean))
    std_err = float(weights.std() / (math.sqrt(ws.n) * mean))
    return log_z, std_err


def ess(ws: WeightedSampleSet) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    if ws.n < 1:
        raise ValueError("Empty sample set")
    weights, _ = ws.relative_weights()
    return float(weights.sum() ** 2 / (weights * weights).sum())


def _evaluate(ws: WeightedSampleSet, h: TestFunction) -> th.Tensor:
    values = th.as_tensor(h(ws.samples), dtype=ws.samples.dtype)
    if values.shape[0] != ws.n:
        raise ValueError(f"The test function returned {values.shape[0]} values for {ws.n} samples")
    check_finite(values, "test function")
    return values


def reweighted_expectation(ws: WeightedSampleSet, h: TestFunction) -> Union[float, th.Tensor]:
    """
    Self-normalized estimate ``sum_i h(x_i) w_i / sum_i w_i`` of the target expectation of ``h``.

    :param ws: weighted samples
    :param h: test function, batched, returning (n,) or (n, k)
    :return: a float for scalar test functions, a (k,) tensor otherwise
    """
    values = _evaluate(ws, h)
    weights, _ = ws.relative_weights()
    weights = weights.reshape((-1,) + (1,) * (values.dim() - 1))
    estimate = (values * weights).sum(dim=0) / weights.sum()
    return float(estimate) if estimate.dim() == 0 else estimate


def importance_estimate(ws: WeightedSampleSet, h: TestFunction) -> Tuple[float, float]:
    """
    Unnormalized estimate ``mean_i h(x_i) w_i`` of ``int h e^{-U}`` with its standard error.
    Unlike ``reweighted_expectation`` it is unbiased at finite n.

    :param ws: weighted samples, at least two
    :param h: scalar test function, batched
    :return: estimate and standard error
    """
    if ws.n < 2:
        raise ValueError(f"Need at least two samples, got {ws.n}")
    values = _evaluate(ws, h)
    if values.dim() != 1:
        raise ValueError("importance_estimate expects a scalar test function")
    weights, shift = ws.relative_weights()
    products = values * weights
    scale = math.exp(shift)
    return float(products.mean()) * scale, float(products.std()) / math.sqrt(ws.n) * scale


def summarize(ws: WeightedSampleSet) -> Dict[str, Any]:
    """Summary record ``{log_z, std_err, ess, n, seed}`` of a sample set."""
    log_z, std_err = log_z_estimate(ws)
    return {"log_z": log_z, "std_err": std_err, "ess": ess(ws), "n": ws.n, "seed": ws.meta.get("seed")}


def save_samples(ws: WeightedSampleSet, path: Union[str, pathlib.Path]) -> pathlib.Path:
    """
    Write the samples as CSV with columns ``x_0, ..., x_{d-1}, log_w``.

    :param ws: weighted samples
    :param path: output file
    :return: the path written
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(ws.samples.numpy(), columns=[f"x_{i}" for i in range(ws.dim)])
    frame["log_w"] = ws.log_weights.numpy()
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def load_samples(path: Union[str, pathlib.Path], meta: Dict[str, Any] = None) -> WeightedSampleSet:
    """Read a sample file written by ``save_samples``."""
    frame = pd.read_csv(path)
    if "log_w" not in frame.columns:
        raise ValueError(f"{path} has no 'log_w' column")
    samples = frame.drop(columns="log_w").to_numpy(dtype=np.float64)
    return WeightedSampleSet(th.as_tensor(samples), th.as_tensor(frame["log_w"].to_numpy(dtype=np.float64)), meta or {})


def save_summary(summary: Dict[str, Any], path: Union[str, pathlib.Path]) -> pathlib.Path:
    """Write a summary record as JSON."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as file_handler:
        json.dump(summary, file_handler, indent=2, sort_keys=True)
        file_handler.write("\n")
    return path
