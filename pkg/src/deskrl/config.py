"""Run configuration: YAML sections mapped onto the library's dataclasses.

Configs are strict: unknown keys are rejected with their dotted path.
Every command snapshots the fully-resolved config next to its outputs so
a run can be reproduced from the artifact directory alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .envs import EnvSpec, POLICY_KINDS
from .training import EvalConfig, TrainConfig

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "ModelSection",
    "AnalysisSection",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "dump_config",
    "save_config",
]


class ConfigError(ValueError):
    """A config file failed validation; the message carries the key path."""


@dataclass
class DatasetConfig:
    path: str = "dataset.jsonl"
    n_episodes: int = 100
    policy_mix: dict = field(default_factory=lambda: {"expert": 1.0})
    epsilon: float = 0.1  # used by epsilon_expert entries in the mix

    def validate(self) -> None:
        for kind in self.policy_mix:
            if kind not in POLICY_KINDS:
                raise ConfigError(
                    f"dataset.policy_mix: unknown policy kind {kind!r} (choose from {POLICY_KINDS})"
                )


@dataclass
class ModelSection:
    """User-facing model settings; env-derived dims are filled in at build time."""

    context_length: int = 8
    hidden_dim: int = 32
    n_blocks: int = 2
    filter_length: int = 6
    mixer: str | list = "conv"  # conv | attention | direct_attention | hybrid | per-block list
    attention_width: int | None = None
    positional_embedding: str | bool = "auto"
    projection_layer: bool = False
    activation: str = "gelu"
    include_action_tokens: bool = True
    unified_filter: bool = False
    dropout: float = 0.1
    scale_attention_scores: bool = False
    conv_identity_init: bool = False

    def resolved_positional(self) -> bool | None:
        if self.positional_embedding == "auto":
            return None
        if isinstance(self.positional_embedding, bool):
            return self.positional_embedding
        raise ConfigError(
            f"model.positional_embedding: expected 'auto' or a boolean, got {self.positional_embedding!r}"
        )


@dataclass
class AnalysisSection:
    tasks: list = field(default_factory=lambda: ["auto"])
    probe_windows: int = 256
    band: int = 6
    zero_out: list = field(default_factory=lambda: ["rtg", "state", "action"])
    ood_multipliers: list = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0])
    grid: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    env: EnvSpec
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(total_updates=1000))
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)


_KNOWN_TASKS = ("auto", "attention_maps", "zero_out", "ood_sweep", "filters")

# keys a user may omit; their values are derived from the global seed
_SEEDED = (("train", "seed"), ("eval", "seed"), ("env", "seed"))


def _coerce(value, target_type, path: str):
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got boolean")
    return value


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            hint = ""
            close = [k for k in known if k.startswith(key[:3])]
            if close:
                hint = f" (did you mean {close[0]!r}?)"
            raise ConfigError(f"{path}.{key}: unknown key{hint}")
        f = known[key]
        if f.type in ("float", float):
            value = _coerce(value, float, f"{path}.{key}")
        elif f.type in ("int", int):
            value = _coerce(value, int, f"{path}.{key}")
        if key == "betas" and isinstance(value, list):
            value = tuple(value)
        if key == "targets" and isinstance(value, list):
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root: expected a mapping")
    sections = {
        "env": (EnvSpec, True),
        "dataset": (DatasetConfig, False),
        "model": (ModelSection, False),
        "train": (TrainConfig, False),
        "eval": (EvalConfig, False),
        "analysis": (AnalysisSection, False),
    }
    top_known = {"seed", "out_dir"} | set(sections)
    for key in data:
        if key not in top_known:
            raise ConfigError(f"{key}: unknown key")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed: expected an integer")
    built = {}
    for name, (cls, required) in sections.items():
        if name in data:
            section = dict(data[name]) if isinstance(data[name], dict) else data[name]
        elif required:
            raise ConfigError(f"{name}: required section is missing")
        else:
            section = {}
        if name == "train" and isinstance(section, dict) and "total_updates" not in section:
            section["total_updates"] = 1000
        built[name] = _build_dataclass(cls, section, name)
    cfg = RunConfig(
        env=built["env"],
        seed=seed,
        out_dir=data.get("out_dir"),
        dataset=built["dataset"],
        model=built["model"],
        train=built["train"],
        eval=built["eval"],
        analysis=built["analysis"],
    )
    # global seed is the default for per-section seeds the user did not set
    for section, key in _SEEDED:
        raw = data.get(section, {})
        if not (isinstance(raw, dict) and key in raw):
            setattr(getattr(cfg, section), key, seed)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    cfg.dataset.validate()
    if isinstance(cfg.model.mixer, str):
        if cfg.model.mixer not in ("conv", "attention", "direct_attention", "hybrid"):
            raise ConfigError(f"model.mixer: unknown mixer {cfg.model.mixer!r}")
    elif isinstance(cfg.model.mixer, list):
        for m in cfg.model.mixer:
            if m not in ("conv", "attention", "direct_attention"):
                raise ConfigError(f"model.mixer: unknown per-block mixer {m!r}")
    else:
        raise ConfigError("model.mixer: expected a name or a per-block list")
    cfg.model.resolved_positional()
    for task in cfg.analysis.tasks:
        if task not in _KNOWN_TASKS:
            raise ConfigError(f"analysis.tasks: unknown task {task!r} (choose from {_KNOWN_TASKS})")
    for modal in cfg.analysis.zero_out:
        if modal not in ("rtg", "state", "action"):
            raise ConfigError(f"analysis.zero_out: unknown modal {modal!r}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
    if data is None:
        raise ConfigError(f"{path}: empty config")
    return config_from_dict(data)


def _plain(value):
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def save_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
