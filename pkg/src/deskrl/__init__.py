"""deskrl: a desk-scale offline RL lab.

Return-conditioned sequence policies with pluggable token mixers
(causal convolution, attention, direct mixing matrices), synthetic
offline-RL environments, a deterministic training and evaluation
pipeline, and an analysis harness.
"""

from .autodiff import NonFiniteError, ShapeError, Tape, TapeError, Tensor, grad_check
from .data import (
    Dataset,
    PaddedWindow,
    Trajectory,
    compute_rtg,
    normalize_states,
    read_dataset,
    write_dataset,
)
from .envs import EnvSpec, generate_dataset, make_env, make_policy, rollout
from .model import (
    ModelConfig,
    SequenceModel,
    count_token_mixer_params,
    load_checkpoint,
    save_checkpoint,
)
from .optim import OptimState, adamw_step
from .training import EvalConfig, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "grad_check",
    "OptimState",
    "adamw_step",
    "Trajectory",
    "Dataset",
    "PaddedWindow",
    "compute_rtg",
    "normalize_states",
    "read_dataset",
    "write_dataset",
    "EnvSpec",
    "make_env",
    "make_policy",
    "rollout",
    "generate_dataset",
    "ModelConfig",
    "SequenceModel",
    "count_token_mixer_params",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "EvalConfig",
    "train",
    "evaluate",
    "__version__",
]
