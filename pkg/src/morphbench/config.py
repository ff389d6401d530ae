"""Run configuration: dataclass sections, JSON files and dotted-path overrides."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .env import EnvConfig
from .policy import PolicyConfig
from .registry import TASK_NAMES

AGENT_KINDS = ("se", "me-mlp", "me-tf")
CONFIG_FILE = "config.json"


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class TrainConfig:
    total_env_steps: int = 200_000
    n_envs: int = 128
    rollout_T: int = 128
    epochs: int = 4
    minibatches: int = 16
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4
    lr_schedule: str = "constant"
    max_grad_norm: float = 0.5
    ema_tau: float = 0.98
    ema_every: str = "minibatch"       # or "update"
    reweighting: str = "off"
    morph_balanced: bool = False
    seed: int = 0
    eval_every: int = 25_000
    eval_steps: int = 2_000
    eval_lanes: int = 10
    success_radius: float = 0.10
    finetune_envs: int = 16

    def __post_init__(self):
        problems = []
        if self.total_env_steps < 0 or self.n_envs < 1 or self.rollout_T < 1:
            problems.append("step counts must be positive")
        if self.minibatches < 1 or (self.n_envs * self.rollout_T) % self.minibatches:
            problems.append("minibatches must divide n_envs * rollout_T")
        if not 0 < self.gamma < 1:
            problems.append("gamma must be in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            problems.append("gae_lambda must be in [0, 1]")
        if self.clip < 0 or self.epochs < 0:
            problems.append("clip and epochs must be >= 0")
        if not 0 <= self.ema_tau <= 1:
            problems.append("ema_tau must be in [0, 1]")
        if self.ema_every not in ("minibatch", "update"):
            problems.append("ema_every must be 'minibatch' or 'update'")
        if self.reweighting not in ("off", "dirichlet"):
            problems.append("reweighting must be 'off' or 'dirichlet'")
        if self.lr_schedule not in ("constant", "linear"):
            problems.append("lr_schedule must be 'constant' or 'linear'")
        if self.eval_every < 1 or self.eval_steps < 1 or self.eval_lanes < 1:
            problems.append("evaluation sizes must be positive")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))


# Named agent variants (backbone / head / value transform / EMA critic / reweighting).
VARIANTS = {
    "mlp": dict(policy=dict(backbone="mlp")),
    "tf": dict(policy=dict(backbone="transformer", head="continuous", value_transform="identity"),
               train=dict(ema_tau=0.0)),
    "tf-sl": dict(policy=dict(backbone="transformer", head="continuous", value_transform="symlog"),
                  train=dict(ema_tau=0.98)),
    "tf-sl-dis": dict(policy=dict(backbone="transformer", head="discrete", value_transform="symlog"),
                      train=dict(ema_tau=0.98)),
    "tf-sl-dis-trw": dict(policy=dict(backbone="transformer", head="discrete", value_transform="symlog"),
                          train=dict(ema_tau=0.98, reweighting="dirichlet")),
}


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    benchmark: str = "arm3"
    agent: str = "me-tf"
    morphology: str | None = None     # SE agents: which train morphology (default: first)
    task: str | None = None           # override every entry's task kind
    obstacles: bool = False
    seed: int = 0
    out_dir: str = "runs"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.benchmark not in TASK_NAMES:
            raise ValueError(f"unknown benchmark {self.benchmark!r}; expected one of {', '.join(TASK_NAMES)}")
        if self.agent not in AGENT_KINDS:
            raise ValueError(f"unknown agent {self.agent!r}; expected one of {', '.join(AGENT_KINDS)}")
        if self.task not in (None, "reach", "push"):
            raise ValueError("task must be reach, push or null")
        if self.agent == "me-mlp" and self.policy.backbone != "mlp":
            raise ValueError("agent me-mlp requires policy.backbone = mlp")
        if self.agent == "me-tf" and self.policy.backbone != "transformer":
            raise ValueError("agent me-tf requires policy.backbone = transformer")

    @property
    def agent_label(self) -> str:
        return {"se": "SE", "me-mlp": "ME-MLP", "me-tf": "ME-Tf"}[self.agent]

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"policy": PolicyConfig, "env": EnvConfig, "train": TrainConfig}


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args or tp is type(None):
            return None
        raise ConfigError(f"{where}: null not allowed")
    if origin is typing.Union or str(origin) == "types.UnionType":
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: cannot interpret {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = args[0] if args else float
        return tuple(_coerce(inner, v, where) for v in value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(f)
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if tp is str:
        return str(value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS and cls is RunConfig:
            kwargs[k] = _build(_SECTIONS[k], v, f"{where}.{k}" if where else k)
        else:
            kwargs[k] = _coerce(hints[k], v, f"{where}.{k}" if where else k)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def run_config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return run_config_from_dict(data)


def apply_overrides(rc: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``section.field -> value`` string overrides (values parsed as JSON when possible)."""
    data = rc.to_dict()
    for path, raw in overrides.items():
        try:
            value = json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            value = raw
        parts = path.split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {path!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field {path!r}")
        node[parts[-1]] = value
    return run_config_from_dict(data)


def preset(agent: str = "me-tf", variant: str | None = None, **top) -> RunConfig:
    """RunConfig for an agent kind, optionally with a named variant's section settings."""
    sections = {"policy": {}, "train": {}, "env": {}}
    if agent in ("se", "me-mlp"):
        sections["policy"]["backbone"] = "mlp"
    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
        for sec, vals in VARIANTS[variant].items():
            sections[sec].update(vals)
    for k in list(top):
        if k in sections:
            sections[k].update(top.pop(k))
    return run_config_from_dict({"agent": agent, **top, **{k: v for k, v in sections.items() if v}})
