"""
YAML experiment configuration.

A config file has the sections ``problem``, ``policy``, ``train``, ``sampling``,
``bench`` and ``run``. ``problem.preset`` names an embedded preset that supplies
defaults for every section; keys given in the file override them. Unknown keys
are rejected with the offending ``section.key`` and its line.
"""
import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import torch as th
import yaml

from simfree_soc.cli.presets import INLINE_KINDS, POLICY_PRESETS, PRESETS, PROBLEM_KINDS, get_preset
from simfree_soc.common.errors import ConfigError
from simfree_soc.common.policies import BasePolicy, ScoreFn, ScoreVjpFn, init_policy
from simfree_soc.common.sde import GRID_MODES
from simfree_soc.common.utils import DTYPE
from simfree_soc.problems import (
    FunnelTarget,
    InitialLaw,
    LinearOuSpec,
    LqrSpec,
    SocProblem,
    finetune_toy_problem,
    follmer_problem,
    funnel_potential,
    funnel_potential_grad,
    funnel_score,
    funnel_score_vjp,
    gaussian_potential,
    gaussian_potential_grad,
    linear_ou_problem,
    lqr_problem,
)
from simfree_soc.train.solver import TrainConfig

SECTIONS = ("problem", "policy", "train", "sampling", "bench", "run")
# Keys of ``TrainConfig`` that are set from the ``run`` section
RUN_OWNED_TRAIN_KEYS = ("seed", "threads")

_SCALED_IDENTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\*\s*I\s*$")


@dataclass
class ProblemConfig:
    """
    :param preset: preset name, or ``inline`` for a problem given entirely in the file
    :param kind: problem family
    :param dim: state dimension
    :param horizon: final time (linear-ou and lqr)
    :param A: drift matrix: ``c*I``, a scalar or a dense row-major list
    :param P: running cost matrix (lqr)
    :param Q: terminal cost matrix (lqr)
    :param gamma: terminal cost vector (linear-ou), a scalar is broadcast
    :param sigma0: volatility matrix
    :param initial_var: variance of the Gaussian initial law (linear-ou and lqr)
    :param scale: standard deviation of the first funnel coordinate
    :param tilt: linear reward of the fine-tuning toy problem
    :param riccati_steps: RK4 steps of the Riccati solve (lqr)
    """

    preset: str = "inline"
    kind: Optional[str] = None
    dim: Optional[int] = None
    horizon: float = 1.0
    A: Any = 0.0
    P: Any = 0.0
    Q: Any = 0.0
    gamma: Any = 0.0
    sigma0: Any = 1.0
    initial_var: float = 0.5
    scale: float = 1.0
    tilt: List[float] = field(default_factory=lambda: [1.0, -0.5])
    riccati_steps: int = 4096

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset '{self.preset}', expected one of {tuple(PRESETS)}")
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(f"unknown problem kind '{self.kind}', expected one of {PROBLEM_KINDS}")
        if self.preset == "inline" and self.kind not in INLINE_KINDS:
            raise ValueError(f"inline problems must be of kind {INLINE_KINDS}, got '{self.kind}'")
        if self.dim is not None and self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.riccati_steps < 1:
            raise ValueError(f"riccati_steps must be positive, got {self.riccati_steps}")


@dataclass
class PolicyConfig:
    """
    :param architecture: ``mlp`` (generic feedback network), ``pis`` (score-gated network, Follmer problems only)
        or a named architecture such as ``pis-funnel``, expanded when the config is resolved
    :param net_arch: hidden widths of the ``mlp`` network
    :param activation: ``tanh`` or ``relu``
    :param time_embedding: ``fourier``, ``raw`` or ``none`` (``mlp``)
    :param num_freqs: number of Fourier frequencies of the time features
    :param zero_last_layer: start from the zero control; the architecture's default when missing
    :param t_arch: time feature network of ``pis``
    :param x_arch: state feature network of ``pis``
    :param head_arch: head of ``pis``
    :param gate_arch: gate network of ``pis``
    :param scalar_gate: scalar instead of per-coordinate gate (``pis``)
    """

    architecture: str = "mlp"
    net_arch: List[int] = field(default_factory=lambda: [128, 128, 128])
    activation: str = "tanh"
    time_embedding: str = "fourier"
    num_freqs: int = 64
    zero_last_layer: Optional[bool] = None
    t_arch: List[int] = field(default_factory=lambda: [64, 64])
    x_arch: List[int] = field(default_factory=lambda: [64, 64])
    head_arch: List[int] = field(default_factory=lambda: [64, 64])
    gate_arch: List[int] = field(default_factory=lambda: [64, 64])
    scalar_gate: bool = False

    def __post_init__(self) -> None:
        if self.architecture not in ("mlp", "pis"):
            raise ValueError(
                f"unknown architecture '{self.architecture}', expected 'mlp', 'pis' or one of {tuple(POLICY_PRESETS)}"
            )
        if self.num_freqs < 1:
            raise ValueError(f"num_freqs must be positive, got {self.num_freqs}")
        for name in ("net_arch", "t_arch", "x_arch", "head_arch", "gate_arch"):
            widths = getattr(self, name)
            if not all(isinstance(width, int) and width > 0 for width in widths):
                raise ValueError(f"{name} must be a list of positive integers, got {widths}")

    def architecture_record(self, dim: int, horizon: float) -> Dict[str, Any]:
        """Constructor arguments in the form expected by ``init_policy``."""
        if self.architecture == "mlp":
            return dict(
                policy="mlp",
                dim=dim,
                horizon=horizon,
                net_arch=list(self.net_arch),
                activation=self.activation,
                time_embedding=self.time_embedding,
                num_freqs=self.num_freqs,
            )
        return dict(
            policy="pis",
            dim=dim,
            horizon=horizon,
            t_arch=list(self.t_arch),
            x_arch=list(self.x_arch),
            head_arch=list(self.head_arch),
            gate_arch=list(self.gate_arch),
            scalar_gate=self.scalar_gate,
            activation=self.activation,
            num_freqs=self.num_freqs,
        )


@dataclass
class SamplingConfig:
    """
    :param n: number of samples
    :param n_steps: time steps of the sampling simulation
    :param grid_mode: ``uniform`` or ``randomized``
    """

    n: int = 10000
    n_steps: int = 100
    grid_mode: str = "uniform"

    def __post_init__(self) -> None:
        if self.n < 2 or self.n_steps < 1:
            raise ValueError(f"need n >= 2 and n_steps >= 1, got n={self.n}, n_steps={self.n_steps}")
        if self.grid_mode not in GRID_MODES:
            raise ValueError(f"unknown grid mode '{self.grid_mode}', expected one of {GRID_MODES}")


@dataclass
class BenchConfig:
    """
    :param steps: numbers of time steps compared
    :param n_walkers: walkers per gradient estimate
    :param repeats: timed gradient estimates per setting
    :param grid_modes: grid modes reported
    """

    steps: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    n_walkers: int = 256
    repeats: int = 3
    grid_modes: List[str] = field(default_factory=lambda: list(GRID_MODES))

    def __post_init__(self) -> None:
        if not self.steps or not all(isinstance(k, int) and k > 0 for k in self.steps):
            raise ValueError(f"steps must be a non-empty list of positive integers, got {self.steps}")
        if self.n_walkers < 1 or self.repeats < 1:
            raise ValueError(f"n_walkers and repeats must be positive, got {self.n_walkers}, {self.repeats}")
        for mode in self.grid_modes:
            if mode not in GRID_MODES:
                raise ValueError(f"unknown grid mode '{mode}', expected one of {GRID_MODES}")


@dataclass
class RunConfig:
    """
    :param seed: master seed
    :param out: output directory
    :param threads: worker threads, 0 for one per core
    :param verbose: 0 silent, 1 info, 2 debug
    """

    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    verbose: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.threads < 0:
            raise ValueError(f"threads must be nonnegative, got {self.threads}")


SECTION_TYPES = {
    "problem": ProblemConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
    "bench": BenchConfig,
    "run": RunConfig,
}


@dataclass
class ExperimentConfig:
    problem: ProblemConfig
    policy: PolicyConfig
    train: TrainConfig
    sampling: SamplingConfig
    bench: BenchConfig
    run: RunConfig

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        sections = {name: asdict(getattr(self, name)) for name in SECTIONS}
        for key in RUN_OWNED_TRAIN_KEYS:
            sections["train"].pop(key)
        return sections

    def config_hash(self) -> str:
        """Git-style content hash (sha1 of ``blob <size>\\0<content>``) of the canonical JSON config."""
        content = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


class ProblemBundle(NamedTuple):
    """A problem with the extra callables some policies and commands need."""

    problem: SocProblem
    score_fn: Optional[ScoreFn] = None
    score_vjp: Optional[ScoreVjpFn] = None
    score_name: str = "custom"


def _key_lines(text: str) -> Dict[Tuple[str, ...], int]:
    """1-based line of every section and ``section.key`` of a YAML document."""
    lines = {}
    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if not isinstance(root, yaml.MappingNode):
        return lines
    for section_node, body in root.value:
        section = str(section_node.value)
        lines[(section,)] = section_node.start_mark.line + 1
        if isinstance(body, yaml.MappingNode):
            for key_node, _ in body.value:
                lines[(section, str(key_node.value))] = key_node.start_mark.line + 1
    return lines


def _read_yaml(path: str) -> Tuple[Dict[str, Any], Dict[Tuple[str, ...], int]]:
    try:
        with open(path) as file_handler:
            text = file_handler.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = yaml.safe_load(text) or {}
        lines = _key_lines(text)
    except yaml.YAMLError as error:
        mark = getattr(error, "problem_mark", None)
        message = f"invalid YAML in {path}: {getattr(error, 'problem', error)}"
        raise ConfigError(message, line=mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping of sections, got {type(raw).__name__}")
    return raw, lines


def _check_type(section: str, key: str, value: Any, default: Any, line: Optional[int]) -> None:
    if value is None or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        return
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}", field=f"{section}.{key}", line=line)


def _build_section(section: str, values: Dict[str, Any], lines: Dict[Tuple[str, ...], int]) -> Any:
    cls = SECTION_TYPES[section]
    known = {f.name: f for f in fields(cls)}
    if section == "train":
        for key in RUN_OWNED_TRAIN_KEYS:
            known.pop(key)
    for key, value in values.items():
        line = lines.get((section, key))
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", field=f"{section}.{key}", line=line)
        spec = known[key]
        if spec.type is Any:
            continue
        default = spec.default_factory() if callable(spec.default_factory) else spec.default
        if isinstance(default, float) and isinstance(value, str):
            # PyYAML reads exponents without a dot (3e-4) as strings
            try:
                value = values[key] = float(value)
            except ValueError:
                pass
        _check_type(section, key, value, default, line)
    try:
        return cls(**values)
    except (TypeError, ValueError) as error:
        raise ConfigError(str(error), field=section, line=lines.get((section,))) from None


def _expand_policy_preset(
    merged: Dict[str, Dict[str, Any]], raw: Dict[str, Any], overrides: Optional[Dict[str, Dict[str, Any]]]
) -> None:
    # A named architecture sits between the problem preset and the keys given explicitly
    name = merged["policy"].get("architecture")
    if name not in POLICY_PRESETS:
        return
    explicit = dict(raw.get("policy") or {})
    explicit.update((overrides or {}).get("policy", {}))
    explicit.pop("architecture", None)
    merged["policy"].update(copy.deepcopy(POLICY_PRESETS[name]))
    merged["policy"].update(explicit)


def resolve_config(
    raw: Dict[str, Any],
    lines: Optional[Dict[Tuple[str, ...], int]] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
) -> ExperimentConfig:
    """
    Merge a raw config over its preset and build the typed sections.

    :param raw: mapping section -> key -> value
    :param lines: line numbers of the keys, for diagnostics
    :param overrides: values applied last (command-line options)
    :return: the experiment config
    """
    lines = lines or {}
    for section, body in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section (expected one of {SECTIONS})", field=str(section), line=lines.get((section,)))
        if body is not None and not isinstance(body, dict):
            raise ConfigError("a section must be a mapping", field=section, line=lines.get((section,)))
    problem_raw = raw.get("problem") or {}
    preset = problem_raw.get("preset")
    if preset is None:
        raise ConfigError("missing preset name (use 'inline' for a problem given in the file)", field="problem.preset")
    if preset not in PRESETS:
        raise ConfigError(
            f"unknown preset '{preset}', expected one of {tuple(PRESETS)}",
            field="problem.preset",
            line=lines.get(("problem", "preset")),
        )

    merged = get_preset(preset)
    for section in SECTIONS:
        merged.setdefault(section, {}).update(raw.get(section) or {})
        merged[section].update((overrides or {}).get(section, {}))
    merged["problem"]["preset"] = preset
    _expand_policy_preset(merged, raw, overrides)

    sections = {section: _build_section(section, merged[section], lines) for section in SECTIONS if section != "train"}
    run = sections["run"]
    sections["train"] = _build_section("train", merged["train"], lines)
    sections["train"].seed = run.seed
    sections["train"].threads = run.threads
    return ExperimentConfig(**sections)


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
) -> ExperimentConfig:
    """
    Load an experiment config from a YAML file, or from a preset alone.

    :param path: YAML file
    :param preset: preset used when no file is given
    :param overrides: values applied last (command-line options)
    :return: the experiment config
    """
    if path is not None:
        raw, lines = _read_yaml(path)
    else:
        raw, lines = {"problem": {"preset": preset or "linear-ou"}}, {}
    return resolve_config(raw, lines, overrides)


def dump_preset(name: str) -> str:
    """The fully resolved preset ``name`` as YAML text."""
    if name not in PRESETS or name == "inline":
        raise ConfigError(f"unknown preset '{name}', expected one of {tuple(p for p in PRESETS if p != 'inline')}")
    return yaml.safe_dump(resolve_config({"problem": {"preset": name}}).to_dict(), sort_keys=False)


def parse_matrix(value: Any, dim: int, name: str) -> th.Tensor:
    """
    ``c*I`` shorthand, a scalar (meaning ``c * I``) or a dense row-major list.
    """
    if isinstance(value, str):
        match = _SCALED_IDENTITY.match(value)
        if match is None:
            raise ConfigError(
                f"cannot parse matrix '{value}', expected 'c*I', a number or a list of rows", field=f"problem.{name}"
            )
        value = float(match.group(1))
    try:
        matrix = th.as_tensor(value, dtype=DTYPE)
        if matrix.dim() == 0:
            matrix = matrix * th.eye(dim, dtype=DTYPE)
    except (TypeError, ValueError, RuntimeError) as error:
        raise ConfigError(str(error), field=f"problem.{name}") from None
    if tuple(matrix.shape) != (dim, dim):
        raise ConfigError(f"expected shape ({dim}, {dim}), got {tuple(matrix.shape)}", field=f"problem.{name}")
    return matrix


def _dim_of(config: ProblemConfig, default: int) -> int:
    return int(config.dim) if config.dim is not None else default


def build_problem(config: ProblemConfig) -> ProblemBundle:
    """
    Build the control problem described by a problem section.

    :param config: problem section
    :return: the problem and, for Follmer problems, the score of the target
    """
    kind = config.kind
    if kind in ("linear-ou", "lqr"):
        dim = _dim_of(config, 20)
        A = parse_matrix(config.A, dim, "A")
        sigma0 = parse_matrix(config.sigma0, dim, "sigma0")
        initial_law = InitialLaw.gaussian(0.0, config.initial_var, dim)
        if kind == "linear-ou":
            gamma = th.as_tensor(config.gamma, dtype=DTYPE)
            spec = LinearOuSpec(A=A, gamma=gamma.expand(dim).clone() if gamma.dim() == 0 else gamma, sigma0=sigma0)
            return ProblemBundle(linear_ou_problem(spec, config.horizon, initial_law))
        spec = LqrSpec(A=A, P=parse_matrix(config.P, dim, "P"), Q=parse_matrix(config.Q, dim, "Q"), sigma0=sigma0)
        return ProblemBundle(lqr_problem(spec, config.horizon, config.riccati_steps, initial_law, name=config.preset))
    if kind == "funnel":
        target = FunnelTarget(dim=_dim_of(config, 10), sigma0_funnel=config.scale)
        problem = follmer_problem(funnel_potential(target), funnel_potential_grad(target), dim=target.dim, name=config.preset)
        return ProblemBundle(problem, partial(funnel_score, target), partial(funnel_score_vjp, target), "funnel")
    if kind == "gaussian-follmer":
        dim = _dim_of(config, 10)
        problem = follmer_problem(gaussian_potential, gaussian_potential_grad, dim=dim, name="gaussian-follmer")
        return ProblemBundle(problem, _gaussian_score, _gaussian_score_vjp, "gaussian")
    problem = finetune_toy_problem(config.tilt)
    if config.dim is not None and config.dim != problem.dim:
        raise ConfigError(f"dim {config.dim} does not match the tilt of length {problem.dim}", field="problem.dim")
    return ProblemBundle(problem)


def _gaussian_score(x: th.Tensor) -> th.Tensor:
    return -x


def _gaussian_score_vjp(x: th.Tensor, v: th.Tensor) -> th.Tensor:
    return -v


def build_policy(config: ExperimentConfig, bundle: ProblemBundle) -> BasePolicy:
    """Initialize the policy of ``config`` for the problem of ``bundle``."""
    problem = bundle.problem
    architecture = config.policy.architecture_record(problem.dim, problem.horizon)
    if architecture["policy"] == "pis":
        if bundle.score_fn is None:
            raise ConfigError("the 'pis' architecture needs a Follmer problem with a known score", field="policy.architecture")
        architecture["score_name"] = bundle.score_name
    return init_policy(
        architecture,
        seed=config.run.seed,
        zero_last_layer=config.policy.zero_last_layer,
        score_fn=bundle.score_fn,
        score_vjp=bundle.score_vjp,
    )
