"""Glue between run configs and the library: build, train, evaluate.

Both the CLI commands and the ablation grid run cells through
:func:`execute_run`, so a single-cell grid and a standalone run with the
same seed produce identical numbers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, RunConfig
from .data import Dataset, normalize_states
from .envs import action_space_from_dict, make_env
from .model import ModelConfig, SequenceModel, mixers_from_name
from .training import TAG_INIT, EvalResult, TrainResult, evaluate, train

__all__ = [
    "RunOutput",
    "build_model_config",
    "build_model",
    "execute_run",
    "apply_cell_overrides",
]


def build_model_config(cfg: RunConfig, dataset: Dataset) -> ModelConfig:
    """Resolve the model section against the dataset's env dimensions.

    The dataset's recorded action space must agree with the configured
    env; a conflict is rejected before any training starts.
    """
    env = make_env(cfg.env)
    meta_space = cfg_space = env.action_space.to_dict()
    if "action_space" in dataset.meta:
        meta_space = dataset.meta["action_space"]
        if action_space_from_dict(meta_space) != env.action_space:
            raise ConfigError(
                f"dataset action space {meta_space} conflicts with env "
                f"'{cfg.env.name}' action space {cfg_space}"
            )
    state_dim = dataset.meta.get("state_dim", dataset.state_dim)
    if state_dim != env.state_dim:
        raise ConfigError(
            f"dataset state dim {state_dim} conflicts with env '{cfg.env.name}' "
            f"state dim {env.state_dim}"
        )
    m = cfg.model
    if isinstance(m.mixer, list):
        mixers = tuple(m.mixer)
    else:
        mixers = mixers_from_name(m.mixer, m.n_blocks)
    return ModelConfig(
        context_length=m.context_length,
        hidden_dim=m.hidden_dim,
        n_blocks=m.n_blocks,
        state_dim=env.state_dim,
        action_space=env.action_space,
        filter_length=m.filter_length,
        mixers=mixers,
        attention_width=m.attention_width,
        positional_embedding=m.resolved_positional(),
        projection_layer=m.projection_layer,
        activation=m.activation,
        include_action_tokens=m.include_action_tokens,
        unified_filter=m.unified_filter,
        dropout=m.dropout,
        scale_attention_scores=m.scale_attention_scores,
        conv_identity_init=m.conv_identity_init,
    )


def build_model(cfg: RunConfig, dataset: Dataset) -> SequenceModel:
    model_config = build_model_config(cfg, dataset)
    rng = np.random.default_rng([cfg.seed, TAG_INIT])
    return SequenceModel(model_config, rng=rng)


@dataclass
class RunOutput:
    model: SequenceModel
    dataset: Dataset  # normalized
    train_result: TrainResult
    eval_results: list[EvalResult]


def execute_run(cfg: RunConfig, dataset: Dataset, log_every: int = 0) -> RunOutput:
    """Normalize, train per the config, then evaluate at the configured targets."""
    model = build_model(cfg, dataset)
    _, normalized = normalize_states(dataset)
    result = train(
        model,
        normalized,
        cfg.train,
        env_spec=cfg.env,
        log_every=log_every,
    )
    eval_results = evaluate(
        model, cfg.env, normalized.stats, cfg.eval, max_return=normalized.max_return
    )
    return RunOutput(model, normalized, result, eval_results)


_CELL_FIELDS = {
    "K": "context_length",
    "L": "filter_length",
    "activation": "activation",
    "include_action_tokens": "include_action_tokens",
    "use_projection_layer": "projection_layer",
}


def apply_cell_overrides(base: RunConfig, cell: dict, seed: int) -> RunConfig:
    """A copy of ``base`` with one ablation cell's axis values and seed applied."""
    cfg = copy.deepcopy(base)
    for axis, value in cell.items():
        if axis in _CELL_FIELDS:
            setattr(cfg.model, _CELL_FIELDS[axis], value)
        elif axis == "filter_count":
            cfg.model.unified_filter = value == 1
        elif axis == "mixer_kind":
            cfg.model.mixer = value
        else:
            raise ValueError(f"unknown ablation axis {axis!r}")
    cfg.seed = seed
    cfg.train.seed = seed
    cfg.eval.seed = seed
    return cfg
