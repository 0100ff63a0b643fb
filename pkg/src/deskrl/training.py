"""Supervised training on sampled context windows and return-conditioned evaluation.

Training minimizes the masked action-prediction error over K-length
windows (squared error for continuous actions, cross-entropy for
discrete). Evaluation conditions the model on a target return-to-go,
subtracting each observed reward from the running target; the running
target is kept as an exact dyadic rational so that
``running_rtg + accumulated_reward == initial_target`` holds exactly at
every step for arbitrary float rewards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import Dataset, NormalizationStats, PaddedWindow, WindowSampler
from .envs import ContinuousActions, DiscreteActions, EnvSpec, make_env
from .model import SequenceModel
from .optim import OptimState, adamw_step

__all__ = [
    "TrainConfig",
    "EvalConfig",
    "TrainResult",
    "EvalResult",
    "EpisodeTrace",
    "masked_action_loss",
    "batch_action_loss",
    "train",
    "run_episode",
    "evaluate_returns",
    "evaluate",
    "fractional_target",
    "METRICS_COLUMNS",
    "write_metrics_csv",
    "write_eval_csv",
]

# rng stream tags so each consumer gets an independent deterministic stream
TAG_INIT, TAG_BATCH, TAG_DROPOUT, TAG_EVAL = 101, 102, 103, 104

METRICS_COLUMNS = (
    "update",
    "loss",
    "grad_norm",
    "lr",
    "eval_target",
    "eval_return_mean",
    "eval_return_std",
)


@dataclass
class TrainConfig:
    total_updates: int
    batch_size: int = 64
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    grad_clip: float | None = 0.25
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # 0 disables in-training evaluation
    eval_episodes: int = 5

    def __post_init__(self):
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class EvalConfig:
    """Target selection for evaluation: absolute returns or multiples of the
    dataset max return."""

    targets: tuple[float, ...] = (1.0,)
    targets_are_multiples: bool = True
    episodes_per_target: int = 20
    deterministic: bool = True
    seed: int = 0

    def resolve_targets(self, max_return: float | None) -> list[float]:
        if not self.targets_are_multiples:
            return [float(t) for t in self.targets]
        if max_return is None:
            raise ValueError("multiple-based targets need the dataset max return")
        return [float(m) * max_return for m in self.targets]


def fractional_target(dataset: Dataset, fraction: float) -> float:
    """A target at ``fraction`` of the way up the dataset's return range.

    For positive max returns this is the plain multiple
    ``fraction * max_return``; when the best return is non-positive the
    multiple would leave the dataset's return range, so the target is
    anchored at the min return instead: ``min + fraction * (max - min)``.
    """
    hi = dataset.max_return
    if hi > 0:
        return fraction * hi
    lo = dataset.min_return
    return lo + fraction * (hi - lo)


def masked_action_loss(
    predictions: Tensor, targets: np.ndarray, mask: np.ndarray, discrete: bool
) -> Tensor:
    """Mean prediction error over valid timesteps: per-dimension mean squared
    error for continuous actions, cross-entropy for discrete ones."""
    if discrete:
        return ad.cross_entropy_masked(predictions, targets, mask)
    return ad.mse_masked(predictions, targets, mask)


def batch_action_loss(
    predictions: Tensor, windows: list[PaddedWindow], discrete: bool
) -> Tensor:
    """Mean over windows of each window's masked action loss.

    ``predictions`` stacks all windows' prediction rows; the per-row
    weights reproduce the per-window masked mean exactly.
    """
    b = len(windows)
    weights = []
    for w in windows:
        valid = int(w.mask.sum())
        if valid == 0:
            raise ValueError("batch_action_loss: window with no valid timesteps")
        weights.append(w.mask / (b * valid))
    row_weights = np.concatenate(weights)
    targets = np.concatenate([w.actions for w in windows], axis=0)
    if discrete:
        return ad.nll_loss_rows(predictions, targets, row_weights)
    return ad.sq_loss_rows(predictions, targets, row_weights)


@dataclass
class TrainResult:
    metrics: list[dict]
    optim_state: OptimState
    best_eval_return: float | None = None
    best_params: dict[str, np.ndarray] | None = None
    rng_states: dict | None = None  # sampler/dropout generator states, for resume


def train(
    model: SequenceModel,
    dataset: Dataset,
    config: TrainConfig,
    env_spec: EnvSpec | None = None,
    eval_target: float | None = None,
    optim_state: OptimState | None = None,
    rng_states: dict | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the update loop: sample a window batch, forward, loss, backward, step.

    Fully deterministic under ``config.seed``. The dataset must already be
    normalized (``dataset.stats`` set). A non-finite loss or gradient
    aborts with the parameters of the last completed update intact.
    """
    if dataset.stats is None:
        raise ValueError("train expects a normalized dataset (stats attached)")
    discrete = model.config.discrete
    if discrete != dataset.discrete_actions:
        raise ValueError("model/dataset action spaces disagree (discrete vs continuous)")

    batch_rng = np.random.default_rng([config.seed, TAG_BATCH])
    drop_rng = np.random.default_rng([config.seed, TAG_DROPOUT])
    if rng_states is not None:
        batch_rng.bit_generator.state = rng_states["batch"]
        drop_rng.bit_generator.state = rng_states["dropout"]
    sampler = WindowSampler(dataset, model.config.context_length, batch_rng)
    state = optim_state or OptimState(
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
        warmup_steps=config.warmup_steps,
    )
    params = model.parameters()
    metrics: list[dict] = []
    best_return: float | None = None
    best_params: dict[str, np.ndarray] | None = None

    start = state.step
    for update in range(start + 1, start + config.total_updates + 1):
        windows = sampler.sample_batch(config.batch_size)
        model.zero_grad()
        with Tape() as tape:
            predictions = model.forward_windows(windows, train_mode=True, rng=drop_rng)
            loss = batch_action_loss(predictions, windows, discrete)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise NonFiniteError(f"non-finite training loss at update {update}; run aborted")
        tape.backward(loss)
        grad_norm = adamw_step(params, state)
        row = {
            "update": update,
            "loss": loss_value,
            "grad_norm": grad_norm,
            "lr": state.effective_lr(),
            "eval_target": None,
            "eval_return_mean": None,
            "eval_return_std": None,
        }
        metrics.append(row)
        if log_every and update % log_every == 0:
            print(f"update {update}: loss {loss_value:.6f}")
        if config.eval_every and update % config.eval_every == 0 and env_spec is not None:
            target = eval_target if eval_target is not None else dataset.max_return
            returns = evaluate_returns(
                model,
                env_spec,
                dataset.stats,
                target,
                config.eval_episodes,
                seed=[config.seed, TAG_EVAL, update],
            )
            mean = float(returns.mean())
            metrics.append(
                {
                    "update": update,
                    "loss": None,
                    "grad_norm": None,
                    "lr": None,
                    "eval_target": target,
                    "eval_return_mean": mean,
                    "eval_return_std": float(returns.std()),
                }
            )
            if best_return is None or mean > best_return:
                best_return = mean
                best_params = model.param_values()
    final_rng = {
        "batch": batch_rng.bit_generator.state,
        "dropout": drop_rng.bit_generator.state,
    }
    return TrainResult(metrics, state, best_return, best_params, final_rng)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EpisodeTrace:
    """Per-step bookkeeping of one evaluation episode.

    ``rtg`` holds the exact running target (dyadic rationals), one entry
    per visited timestep, starting with the initial target.
    """

    rtg: list[Fraction] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)


def _zero_out(window: PaddedWindow, modal: str) -> PaddedWindow:
    """Zero one modality's raw inputs; the current state is always kept intact."""
    rtg, states, actions = window.rtg, window.states, window.actions
    if modal == "rtg":
        rtg = np.zeros_like(rtg)
    elif modal == "state":
        states = states.copy()
        states[:-1] = 0.0
    elif modal == "action":
        actions = np.zeros_like(actions)
    else:
        raise ValueError(f"unknown modal {modal!r}; choose rtg, state, or action")
    return PaddedWindow(rtg, states, actions, window.mask, window.traj_index, window.end_t)


def _eval_window(
    config, rtg_hist: list[float], states: list[np.ndarray], actions: list
) -> PaddedWindow:
    k = config.context_length
    t = len(actions)  # 0-based index of the current timestep
    valid = min(k, t + 1)
    pad = k - valid
    lo = t + 1 - valid
    rtg = np.zeros(k)
    state_dim = states[0].shape[0]
    win_states = np.zeros((k, state_dim))
    if config.discrete:
        win_actions = np.zeros(k, dtype=np.int64)
    else:
        win_actions = np.zeros((k, config.action_space.dim))
    mask = np.zeros(k, dtype=bool)
    rtg[pad:] = rtg_hist[lo : t + 1]
    win_states[pad:] = states[lo : t + 1]
    n_acts = valid - 1  # executed actions for timesteps lo..t-1
    if n_acts > 0:
        win_actions[pad : pad + n_acts] = actions[lo : lo + n_acts]
    mask[pad:] = True
    return PaddedWindow(rtg, win_states, win_actions, mask, -1, t + 1)


def run_episode(
    model,
    env,
    stats: NormalizationStats | None,
    target: float,
    rng: np.random.Generator,
    deterministic: bool = True,
    zero_modal: str | None = None,
) -> tuple[float, EpisodeTrace]:
    """One return-conditioned episode; returns (episode return, trace).

    The model sees a sliding window of the last <= K timesteps, left-padded
    at the episode start. After each step the observed reward is
    subtracted from the running target (which may go negative).
    """
    spec = env.spec
    raw_state = env.reset(rng)
    running = Fraction(float(target))
    trace = EpisodeTrace(rtg=[running])
    norm = stats.apply if stats is not None else (lambda s: np.asarray(s, dtype=np.float64))
    rtg_hist: list[float] = [float(running)]
    state_hist: list[np.ndarray] = [norm(raw_state)]
    action_hist: list = []
    rewards: list[float] = []
    discrete = isinstance(env.action_space, DiscreteActions)
    for _ in range(spec.horizon):
        window = _eval_window(model.config, rtg_hist, state_hist, action_hist)
        assert window.end_t == len(action_hist) + 1  # no lookahead past the current step
        if zero_modal is not None:
            window = _zero_out(window, zero_modal)
        out = model.predict_last(window)
        if discrete:
            if deterministic:
                action = int(np.argmax(out))
            else:
                z = out - out.max()
                p = np.exp(z) / np.exp(z).sum()
                action = int(rng.choice(len(p), p=p))
        else:
            action = env.action_space.clip(out)
        raw_state, reward, done = env.step(raw_state, action, rng)
        rewards.append(float(reward))
        action_hist.append(action)
        running = running - Fraction(float(reward))
        trace.rtg.append(running)
        trace.rewards.append(float(reward))
        rtg_hist.append(float(running))
        state_hist.append(norm(raw_state))
        if done:
            break
    return float(np.sum(rewards)) if rewards else 0.0, trace


def evaluate_returns(
    model,
    env_spec: EnvSpec,
    stats: NormalizationStats | None,
    target: float,
    episodes: int,
    seed,
    deterministic: bool = True,
    zero_modal: str | None = None,
) -> np.ndarray:
    """Episode returns for one target; episode ``i`` uses rng ``[seed..., i]``."""
    env = make_env(env_spec)
    base = list(np.atleast_1d(np.asarray(seed, dtype=np.int64)))
    returns = np.zeros(episodes)
    for i in range(episodes):
        rng = np.random.default_rng([*base, i])
        returns[i], _ = run_episode(
            model, env, stats, target, rng, deterministic=deterministic, zero_modal=zero_modal
        )
    return returns


@dataclass
class EvalResult:
    target: float
    returns: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.returns.mean())

    @property
    def std(self) -> float:
        return float(self.returns.std())


def evaluate(
    model,
    env_spec: EnvSpec,
    stats: NormalizationStats | None,
    eval_config: EvalConfig,
    max_return: float | None = None,
    zero_modal: str | None = None,
) -> list[EvalResult]:
    """Per-target mean/std returns for every target in ``eval_config``."""
    results = []
    for i, target in enumerate(eval_config.resolve_targets(max_return)):
        returns = evaluate_returns(
            model,
            env_spec,
            stats,
            target,
            eval_config.episodes_per_target,
            seed=[eval_config.seed, TAG_EVAL, i],
            deterministic=eval_config.deterministic,
            zero_modal=zero_modal,
        )
        results.append(EvalResult(target, returns))
    return results


# ---------------------------------------------------------------------------
# CSV artifacts


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def write_eval_csv(results: list[EvalResult], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["target", "episodes", "return_mean", "return_std"])
        for r in results:
            writer.writerow([_fmt(r.target), len(r.returns), _fmt(r.mean), _fmt(r.std)])
