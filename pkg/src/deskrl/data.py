"""Trajectory storage, return-to-go relabeling, normalization, window sampling, and file IO.

Datasets are stored as line-oriented JSON: one header line with metadata
and normalization statistics, then one episode per line. Floats are
serialized with full round-trip precision, so write/read is lossless.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Trajectory",
    "Dataset",
    "NormalizationStats",
    "PaddedWindow",
    "WindowSampler",
    "DatasetFormatError",
    "compute_rtg",
    "make_trajectory",
    "compute_state_stats",
    "normalize_states",
    "sample_subtrajectory",
    "write_dataset",
    "read_dataset",
    "datasets_equal",
]

FORMAT_NAME = "deskrl-dataset"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated, or of an unsupported version."""


def compute_rtg(rewards) -> np.ndarray:
    """Undiscounted suffix sums: ``rtg[t] = rewards[t] + rewards[t+1] + ...``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards contain non-finite values")
    return np.cumsum(r[::-1])[::-1].copy()


@dataclass
class Trajectory:
    """One episode: aligned state/action/reward sequences plus derived RTG labels."""

    states: np.ndarray  # (T, state_dim)
    actions: np.ndarray  # (T, action_dim) float or (T,) int
    rewards: np.ndarray  # (T,)
    rtgs: np.ndarray  # (T,)
    policy_label: str = ""

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rtgs[0])


def make_trajectory(states, actions, rewards, policy_label: str = "") -> Trajectory:
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions)
    if actions.dtype.kind in "iu":
        actions = actions.astype(np.int64)
    else:
        actions = actions.astype(np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    if not (len(states) == len(actions) == len(rewards)):
        raise ValueError(
            f"length mismatch: states {len(states)}, actions {len(actions)}, rewards {len(rewards)}"
        )
    return Trajectory(states, actions, rewards, compute_rtg(rewards), policy_label)


@dataclass
class NormalizationStats:
    """Per-dimension z-score statistics over all states in a dataset."""

    mean: np.ndarray
    std: np.ndarray
    clamped_dims: tuple[int, ...] = ()

    def apply(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "clamped_dims": list(self.clamped_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            clamped_dims=tuple(d.get("clamped_dims", [])),
        )


@dataclass
class Dataset:
    """An immutable collection of trajectories plus metadata and state statistics."""

    trajectories: list[Trajectory]
    meta: dict = field(default_factory=dict)
    stats: NormalizationStats | None = None

    def __len__(self) -> int:
        return len(self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([t.total_return for t in self.trajectories])

    @property
    def max_return(self) -> float:
        return float(self.returns().max())

    @property
    def min_return(self) -> float:
        return float(self.returns().min())

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def discrete_actions(self) -> bool:
        return self.trajectories[0].actions.ndim == 1


def compute_state_stats(dataset: Dataset) -> NormalizationStats:
    """Dataset-wide per-dimension mean and population std, floored at ``STD_FLOOR``."""
    if not dataset.trajectories:
        raise ValueError("cannot compute statistics of an empty dataset")
    all_states = np.concatenate([t.states for t in dataset.trajectories], axis=0)
    mean = all_states.mean(axis=0)
    std = all_states.std(axis=0)
    clamped = tuple(int(i) for i in np.where(std < STD_FLOOR)[0])
    if clamped:
        warnings.warn(f"state dimensions {clamped} have near-zero variance; std clamped to {STD_FLOOR}")
        std = np.maximum(std, STD_FLOOR)
    return NormalizationStats(mean=mean, std=std, clamped_dims=clamped)


def normalize_states(dataset: Dataset) -> tuple[NormalizationStats, Dataset]:
    """Z-score every state with dataset-wide statistics; returns (stats, new dataset)."""
    stats = compute_state_stats(dataset)
    trajs = [
        Trajectory(stats.apply(t.states), t.actions, t.rewards, t.rtgs, t.policy_label)
        for t in dataset.trajectories
    ]
    return stats, Dataset(trajs, dict(dataset.meta), stats)


@dataclass
class PaddedWindow:
    """A K-timestep context window ending at ``(rtg_t, s_t)``.

    Positions before the episode start are zero in every field and marked
    invalid in ``mask``. ``actions`` holds K entries; the model consumes
    the first K-1 as inputs and training uses all K as targets.
    """

    rtg: np.ndarray  # (K,)
    states: np.ndarray  # (K, state_dim)
    actions: np.ndarray  # (K, action_dim) float or (K,) int
    mask: np.ndarray  # (K,) bool
    traj_index: int = -1
    end_t: int = -1  # 1-indexed end timestep within the episode


def _window_from(traj: Trajectory, traj_index: int, t: int, k: int) -> PaddedWindow:
    valid = min(k, t)
    pad = k - valid
    s_dim = traj.states.shape[1]
    rtg = np.zeros(k)
    states = np.zeros((k, s_dim))
    if traj.actions.ndim == 1:
        actions = np.zeros(k, dtype=np.int64)
    else:
        actions = np.zeros((k, traj.actions.shape[1]))
    mask = np.zeros(k, dtype=bool)
    rtg[pad:] = traj.rtgs[t - valid : t]
    states[pad:] = traj.states[t - valid : t]
    actions[pad:] = traj.actions[t - valid : t]
    mask[pad:] = True
    return PaddedWindow(rtg, states, actions, mask, traj_index, t)


def sample_subtrajectory(dataset: Dataset, k: int, rng: np.random.Generator) -> PaddedWindow:
    """Sample a window: trajectory weighted by length, then a uniform end timestep."""
    lengths = np.array([t.length for t in dataset.trajectories], dtype=np.float64)
    probs = lengths / lengths.sum()
    idx = int(rng.choice(len(lengths), p=probs))
    traj = dataset.trajectories[idx]
    t = int(rng.integers(1, traj.length + 1))
    return _window_from(traj, idx, t, k)


class WindowSampler:
    """Seeded window sampler over a fixed dataset; owns its rng."""

    def __init__(self, dataset: Dataset, context_length: int, rng: np.random.Generator):
        if not dataset.trajectories:
            raise ValueError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.context_length = context_length
        self.rng = rng
        lengths = np.array([t.length for t in dataset.trajectories], dtype=np.float64)
        self._probs = lengths / lengths.sum()

    def sample(self) -> PaddedWindow:
        idx = int(self.rng.choice(len(self._probs), p=self._probs))
        traj = self.dataset.trajectories[idx]
        t = int(self.rng.integers(1, traj.length + 1))
        return _window_from(traj, idx, t, self.context_length)

    def sample_batch(self, n: int) -> list[PaddedWindow]:
        return [self.sample() for _ in range(n)]


# ---------------------------------------------------------------------------
# file format


def _check_finite(name: str, arr: np.ndarray, episode: int) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DatasetFormatError(
            f"episode {episode}: non-finite value in '{name}' at index {tuple(int(i) for i in bad)}"
        )


def write_dataset(dataset: Dataset, path) -> None:
    """Write header + one JSON episode per line; rejects non-finite values."""
    path = Path(path)
    lines = []
    for i, traj in enumerate(dataset.trajectories):
        _check_finite("states", traj.states, i)
        _check_finite("rewards", traj.rewards, i)
        if traj.actions.dtype.kind == "f":
            _check_finite("actions", traj.actions, i)
        lines.append(
            json.dumps(
                {
                    "states": traj.states.tolist(),
                    "actions": traj.actions.tolist(),
                    "rewards": traj.rewards.tolist(),
                    "policy": traj.policy_label,
                },
                sort_keys=True,
            )
        )
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_episodes": len(dataset.trajectories),
        "meta": dataset.meta,
        "stats": dataset.stats.to_dict() if dataset.stats is not None else None,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for line in lines:
            f.write(line + "\n")


def read_dataset(path) -> Dataset:
    """Read a dataset file, validating format, episode count, and finiteness."""
    path = Path(path)
    with open(path) as f:
        raw_lines = f.read().splitlines()
    if not raw_lines:
        raise DatasetFormatError(f"{path}: empty file (missing header line)")
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: corrupt header line: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported version {header.get('version')} (expected {FORMAT_VERSION})"
        )
    declared = header.get("n_episodes")
    body = raw_lines[1:]
    if declared != len(body):
        raise DatasetFormatError(
            f"{path}: header declares {declared} episodes, file has {len(body)} (after line 1)"
        )
    discrete = False
    meta = header.get("meta", {})
    action_kind = meta.get("action_space", {}).get("kind") if isinstance(meta, dict) else None
    trajs = []
    for i, line in enumerate(body):
        lineno = i + 2
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}: line {lineno}: corrupt episode record: {e}") from None
        try:
            states = np.asarray(rec["states"], dtype=np.float64)
            rewards = np.asarray(rec["rewards"], dtype=np.float64)
            raw_actions = rec["actions"]
        except KeyError as e:
            raise DatasetFormatError(f"{path}: line {lineno}: missing field {e}") from None
        if action_kind == "discrete" or (
            action_kind is None and raw_actions and isinstance(raw_actions[0], int)
        ):
            actions = np.asarray(raw_actions, dtype=np.int64)
            discrete = True
        else:
            actions = np.asarray(raw_actions, dtype=np.float64)
        if not (len(states) == len(actions) == len(rewards)):
            raise DatasetFormatError(
                f"{path}: line {lineno}: length mismatch "
                f"(states {len(states)}, actions {len(actions)}, rewards {len(rewards)})"
            )
        _check_finite("states", states, i)
        _check_finite("rewards", rewards, i)
        if not discrete:
            _check_finite("actions", actions, i)
        trajs.append(Trajectory(states, actions, rewards, compute_rtg(rewards), rec.get("policy", "")))
    stats = NormalizationStats.from_dict(header["stats"]) if header.get("stats") else None
    return Dataset(trajs, meta, stats)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Structural equality of every value and metadata field."""
    if len(a) != len(b) or a.meta != b.meta:
        return False
    if (a.stats is None) != (b.stats is None):
        return False
    if a.stats is not None:
        if not (
            np.array_equal(a.stats.mean, b.stats.mean)
            and np.array_equal(a.stats.std, b.stats.std)
            and a.stats.clamped_dims == b.stats.clamped_dims
        ):
            return False
    for ta, tb in zip(a.trajectories, b.trajectories):
        if ta.policy_label != tb.policy_label:
            return False
        for fa, fb in ((ta.states, tb.states), (ta.actions, tb.actions), (ta.rewards, tb.rewards)):
            if fa.shape != fb.shape or not np.array_equal(fa, fb):
                return False
    return True
