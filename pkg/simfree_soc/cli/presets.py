"""
Experiment presets. A preset supplies defaults for every config section;
keys given in a config file override them.
"""
import copy
from typing import Any, Dict

# Problem kinds accepted by ``problem.kind``
PROBLEM_KINDS = ("linear-ou", "lqr", "funnel", "gaussian-follmer", "finetune-toy")
# Kinds an inline problem may use
INLINE_KINDS = ("linear-ou", "lqr")

_MLP = {"architecture": "mlp", "net_arch": [64, 64, 64], "activation": "tanh", "time_embedding": "fourier", "num_freqs": 64}
_PIS = {
    "architecture": "pis",
    "t_arch": [64, 64],
    "x_arch": [64, 64],
    "head_arch": [64, 64],
    "gate_arch": [64, 64],
    "activation": "tanh",
    "num_freqs": 64,
}

# Named policy architectures accepted by ``policy.architecture``; keys given in the file override them
POLICY_PRESETS: Dict[str, Dict[str, Any]] = {"pis-funnel": _PIS}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "linear-ou": {
        "problem": {"kind": "linear-ou", "dim": 20, "horizon": 1.0, "A": "-1*I", "gamma": 1.0, "sigma0": "1*I"},
        "policy": dict(_MLP),
        "train": {"iterations": 5000, "n_walkers": 1000, "n_steps": 64, "learning_rate": 3e-4},
    },
    "lqr-easy": {
        "problem": {"kind": "lqr", "dim": 20, "horizon": 1.0, "A": "0.2*I", "P": "0.2*I", "Q": "0.1*I", "sigma0": "1*I"},
        "policy": dict(_MLP),
        "train": {"iterations": 10000, "n_walkers": 512, "n_steps": 64, "learning_rate": 3e-4},
    },
    "lqr-hard": {
        "problem": {"kind": "lqr", "dim": 20, "horizon": 1.0, "A": "1*I", "P": "1*I", "Q": "0.5*I", "sigma0": "1*I"},
        "policy": dict(_MLP),
        "train": {"iterations": 10000, "n_walkers": 512, "n_steps": 64, "learning_rate": 3e-4},
    },
    "funnel": {
        "problem": {"kind": "funnel", "dim": 10, "scale": 1.0},
        "policy": {"architecture": "pis-funnel"},
        "train": {"iterations": 5000, "n_walkers": 1000, "n_steps": 100, "learning_rate": 3e-4},
        "sampling": {"n": 10000, "n_steps": 100},
    },
    "funnel-wide": {
        "problem": {"kind": "funnel", "dim": 10, "scale": 3.0},
        "policy": {"architecture": "pis-funnel"},
        "train": {"iterations": 5000, "n_walkers": 1000, "n_steps": 100, "learning_rate": 3e-4},
        "sampling": {"n": 10000, "n_steps": 100},
    },
    "gaussian-follmer": {
        "problem": {"kind": "gaussian-follmer", "dim": 10},
        "policy": dict(_MLP, zero_last_layer=True),
        "train": {"iterations": 200, "n_walkers": 256, "n_steps": 32, "learning_rate": 3e-4},
        "sampling": {"n": 100, "n_steps": 32},
    },
    "finetune-toy": {
        "problem": {"kind": "finetune-toy", "tilt": [1.0, -0.5]},
        "policy": dict(_MLP, net_arch=[32, 32], zero_last_layer=True),
        "train": {"iterations": 2000, "n_walkers": 512, "n_steps": 32, "learning_rate": 1e-3},
        "sampling": {"n": 10000, "n_steps": 32},
    },
    "inline": {},
}


def get_preset(name: str) -> Dict[str, Dict[str, Any]]:
    """
    Sections of preset ``name`` (a copy, safe to modify).

    :param name: preset name
    :return: mapping section -> key -> value
    """
    if name not in PRESETS:
        raise KeyError(name)
    return copy.deepcopy(PRESETS[name])
