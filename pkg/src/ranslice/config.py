"""Experiment configuration: YAML file + ``--section.key value`` overrides.

Every section is a dataclass; unknown keys are rejected with their dotted
path, and the fully resolved configuration can be dumped back to YAML and
re-parsed to an identical object.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .agents import Hyperparams
from .env import EnvConfig
from .mdp import UserTuple
from .scoring import ScoreConstants
from .traffic import SLICES, ParameterError, SliceProfile, default_profile

COMMON_TUPLES = [(0, 1, 2), (0, 2, 2), (1, 1, 2), (1, 1, 4), (1, 2, 1), (1, 2, 3), (1, 2, 5), (1, 3, 4), (3, 2, 3)]
EVAL_TUPLES = [(0, 1, 2), (0, 2, 2), (1, 1, 4), (1, 2, 3)]


class ConfigError(ValueError):
    pass


@dataclass
class TrafficConfig:
    profiles: dict = field(default_factory=dict)   # slice -> parameter overrides
    traces_per_slice: int = 4
    trace_duration_s: float = 600.0
    chunk_s: float = 120.0
    trace_dir: str = ""                             # load <slice>_*.csv traces instead of generating

    def validate(self) -> None:
        for name in self.profiles:
            if name not in SLICES:
                raise ConfigError(f"traffic.profiles.{name}: unknown slice")
        try:
            self.slice_profiles()
        except ParameterError as exc:
            raise ConfigError(f"traffic.profiles: {exc}") from exc
        if self.traces_per_slice < 1:
            raise ConfigError("traffic.traces_per_slice must be >= 1")
        if self.chunk_s <= 0 or self.trace_duration_s < self.chunk_s:
            raise ConfigError("traffic.trace_duration_s must be >= traffic.chunk_s > 0")

    def slice_profiles(self) -> dict[str, SliceProfile]:
        return {s: SliceProfile.from_dict(s, self.profiles[s]) if s in self.profiles else default_profile(s)
                for s in SLICES}


@dataclass
class PipelineConfig:
    epochs: int = 4
    trials_per_tuple: int = 3
    common_tuples: list = field(default_factory=lambda: [list(t) for t in COMMON_TUPLES])
    extra_tuples: int = 5
    extra_trials: int = 1
    episode_periods: int = 480
    initial_rbs: list = field(default_factory=lambda: [5, 6])
    initial_policy: str = "random"
    split_ratio: float = 0.8
    target_rel_halfwidth: float = 0.10
    topup_cap: int = 10
    write_kpis: bool = True
    expert_weights: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    eval_tuples: list = field(default_factory=lambda: [list(t) for t in EVAL_TUPLES])
    eval_trials: int = 10

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("pipeline.epochs must be >= 1")
        if self.trials_per_tuple < 1 or self.extra_trials < 1:
            raise ConfigError("pipeline.trials_per_tuple and pipeline.extra_trials must be >= 1")
        if self.extra_tuples < 0 or self.topup_cap < 0 or self.eval_trials < 0:
            raise ConfigError("pipeline.extra_tuples, topup_cap, eval_trials must be >= 0")
        if self.eval_trials == 1:
            raise ConfigError("pipeline.eval_trials must be 0 or >= 2")
        if self.episode_periods < 1:
            raise ConfigError("pipeline.episode_periods must be >= 1")
        for key in ("common_tuples", "eval_tuples"):
            for t in getattr(self, key):
                try:
                    UserTuple(*[int(v) for v in t]).validate()
                except Exception as exc:
                    raise ConfigError(f"pipeline.{key}: {exc}") from exc
        if len(self.initial_rbs) != 2 or min(self.initial_rbs) < 1 or sum(self.initial_rbs) > 16:
            raise ConfigError("pipeline.initial_rbs must be [rb_mmtc, rb_urllc], each >= 1, sum <= 16")
        if self.initial_policy not in ("random", "expert"):
            raise ConfigError("pipeline.initial_policy must be 'random' or 'expert'")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("pipeline.split_ratio must lie in (0, 1)")
        if self.target_rel_halfwidth <= 0:
            raise ConfigError("pipeline.target_rel_halfwidth must be > 0")
        if len(self.expert_weights) != 3 or min(self.expert_weights) < 0:
            raise ConfigError("pipeline.expert_weights must be three non-negative numbers")


@dataclass
class ClassifierConfig:
    window_sizes: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    trials_per_class: int = 30
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    kernels: int = 20
    kernel_len: int = 4
    hidden: int = 512
    lr: float = 1e-3
    min_lr: float = 1e-5
    lr_factor: float = 0.1
    plateau_patience: int = 10
    plateau_delta: float = 1e-4
    early_stop_patience: int = 25
    max_epochs: int = 350
    batch_size: int = 64
    max_train_per_class: int = 1000
    itr_threshold: float = 0.0
    dtype: str = "float32"
    rbs: list = field(default_factory=lambda: [5, 6])

    def validate(self) -> None:
        if not self.window_sizes or any(int(t) < self.kernel_len for t in self.window_sizes):
            raise ConfigError("classifier.window_sizes must be >= classifier.kernel_len")
        if self.trials_per_class < 2:
            raise ConfigError("classifier.trials_per_class must be >= 2")
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("classifier.test_fraction/val_fraction must lie in (0, 1)")
        for name in ("kernels", "kernel_len", "hidden", "max_epochs", "batch_size", "max_train_per_class",
                     "plateau_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"classifier.{name} must be >= 1")
        if not 0 < self.min_lr <= self.lr:
            raise ConfigError("classifier.min_lr must lie in (0, classifier.lr]")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("classifier.lr_factor must lie in (0, 1)")
        if self.itr_threshold < 0:
            raise ConfigError("classifier.itr_threshold must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("classifier.dtype must be 'float32' or 'float64'")


@dataclass
class Config:
    seed: int = 0
    out_dir: str = "runs/default"
    jobs: int = 0
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    score: ScoreConstants = field(default_factory=ScoreConstants)
    agents: Hyperparams = field(default_factory=Hyperparams)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def validate(self) -> "Config":
        if self.jobs < 0:
            raise ConfigError("jobs must be >= 0")
        for section in ("traffic", "env", "score", "agents", "pipeline", "classifier"):
            try:
                getattr(self, section).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(str(exc) if section in str(exc) else f"{section}: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp) or tp
    if origin is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if origin is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if origin is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [list(v) if isinstance(v, tuple) else v for v in value]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        path = f"{prefix}{f.name}"
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, data[f.name] or {}, path + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], tp, path)
    if cls is EnvConfig and "radio" in kwargs:
        radio = EnvConfig().radio
        for name, vals in kwargs["radio"].items():
            if name not in radio:
                raise ConfigError(f"unknown config key '{prefix}radio.{name}'")
            radio[name] = [float(v) for v in vals]
        kwargs["radio"] = radio
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> Config:
    cfg = _build(Config, data or {}, "")
    return cfg.validate()


def set_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override '{dotted}': '{p}' is not a section")
    node[parts[-1]] = value


def load_raw(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def parse_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> Config:
    """Load ``path`` (YAML), apply dotted-key overrides, fill defaults and validate."""
    data = load_raw(path)
    for k, v in (overrides or {}).items():
        set_dotted(data, k, v)
    return config_from_dict(data)


def dump_config(cfg: Config, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text
