"""Deterministic, seedable synthetic MDPs with graded behavior policies.

Three environments cover the usual offline-RL reward regimes:

* ``point_reach``: dense negative-distance reward, continuous 2-D actions.
* ``grid_goal``: sparse goal reward on a walled grid, 4 discrete actions.
* ``delay_chain``: all reward delayed to the final step, binary actions.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .data import Dataset, Trajectory, compute_state_stats, make_trajectory

__all__ = [
    "ContinuousActions",
    "DiscreteActions",
    "ActionSpace",
    "EnvSpec",
    "make_env",
    "env_step",
    "make_policy",
    "rollout",
    "generate_dataset",
    "POLICY_KINDS",
]

POLICY_KINDS = ("expert", "medium", "random", "epsilon_expert")

_DEFAULT_HORIZONS = {"point_reach": 60, "grid_goal": 64, "delay_chain": 10}


@dataclass(frozen=True)
class ContinuousActions:
    dim: int
    low: float = -1.0
    high: float = 1.0

    def clip(self, a: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(a, dtype=np.float64), self.low, self.high)

    def to_dict(self) -> dict:
        return {"kind": "continuous", "dim": self.dim, "low": self.low, "high": self.high}


@dataclass(frozen=True)
class DiscreteActions:
    n: int

    def to_dict(self) -> dict:
        return {"kind": "discrete", "n": self.n}


ActionSpace = Union[ContinuousActions, DiscreteActions]


def action_space_from_dict(d: dict) -> ActionSpace:
    if d["kind"] == "continuous":
        return ContinuousActions(dim=d["dim"], low=d.get("low", -1.0), high=d.get("high", 1.0))
    if d["kind"] == "discrete":
        return DiscreteActions(n=d["n"])
    raise ValueError(f"unknown action space kind {d['kind']!r}")


@dataclass
class EnvSpec:
    """Environment selection and parameters. ``gamma`` is recorded but unused
    by return-to-go relabeling (undiscounted suffix sums throughout)."""

    name: str
    horizon: int | None = None
    noise_scale: float = 0.0
    gamma: float = 0.99
    seed: int = 0
    width: int = 8  # grid_goal only
    height: int = 8  # grid_goal only

    def __post_init__(self):
        if self.name not in _DEFAULT_HORIZONS:
            raise ValueError(f"unknown env {self.name!r}; choose from {sorted(_DEFAULT_HORIZONS)}")
        if self.horizon is None:
            self.horizon = _DEFAULT_HORIZONS[self.name]
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "horizon": self.horizon,
            "noise_scale": self.noise_scale,
            "gamma": self.gamma,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
        }


class PointReach:
    """Move a 2-D point to the origin; reward is minus the post-step distance."""

    GOAL_RADIUS = 0.05
    STEP_SIZE = 0.1

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.goal = np.zeros(2)
        self.state_dim = 2
        self.action_space = ContinuousActions(dim=2)
        self.reward_structure = "dense"

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)

    def step(self, state, action, rng: np.random.Generator):
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,):
            raise ValueError(f"point_reach expects a 2-d action, got shape {a.shape}")
        x = state + self.STEP_SIZE * self.action_space.clip(a)
        if self.spec.noise_scale > 0.0:
            x = x + rng.normal(0.0, self.spec.noise_scale, size=2)
        dist = float(np.linalg.norm(x - self.goal))
        return x, -dist, dist < self.GOAL_RADIUS


class GridGoal:
    """Reach a random goal on a walled grid; reward 1 exactly once at the goal.

    States are encoded as a normalized real vector (x, y, goal_x, goal_y)
    so the same continuous-state model applies; actions stay discrete.
    """

    MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.width = spec.width
        self.height = spec.height
        # Interior wall column with a gap at the top and bottom rows.
        cx = self.width // 2
        self.walls = frozenset((cx, y) for y in range(1, self.height - 2))
        self.free_cells = [
            (x, y)
            for x in range(self.width)
            for y in range(self.height)
            if (x, y) not in self.walls
        ]
        self.state_dim = 4
        self.action_space = DiscreteActions(n=4)
        self.reward_structure = "sparse"

    def encode(self, pos, goal) -> np.ndarray:
        w, h = self.width - 1, self.height - 1
        return np.array([pos[0] / w, pos[1] / h, goal[0] / w, goal[1] / h])

    def decode(self, state: np.ndarray):
        w, h = self.width - 1, self.height - 1
        return (
            (int(round(state[0] * w)), int(round(state[1] * h))),
            (int(round(state[2] * w)), int(round(state[3] * h))),
        )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        i = int(rng.integers(len(self.free_cells)))
        j = int(rng.integers(len(self.free_cells) - 1))
        if j >= i:
            j += 1
        return self.encode(self.free_cells[i], self.free_cells[j])

    def step(self, state, action, rng: np.random.Generator):
        a = int(action)
        if not 0 <= a < 4:
            raise ValueError(f"grid_goal expects an action in 0..3, got {action!r}")
        pos, goal = self.decode(np.asarray(state, dtype=np.float64))
        dx, dy = self.MOVES[a]
        nxt = (pos[0] + dx, pos[1] + dy)
        if (
            not (0 <= nxt[0] < self.width and 0 <= nxt[1] < self.height)
            or nxt in self.walls
        ):
            nxt = pos
        reached = nxt == goal
        return self.encode(nxt, goal), (1.0 if reached else 0.0), reached

    def shortest_path_distances(self, goal) -> dict:
        dist = {goal: 0}
        queue = deque([goal])
        while queue:
            cell = queue.popleft()
            for dx, dy in self.MOVES:
                nxt = (cell[0] + dx, cell[1] + dy)
                if (
                    0 <= nxt[0] < self.width
                    and 0 <= nxt[1] < self.height
                    and nxt not in self.walls
                    and nxt not in dist
                ):
                    dist[nxt] = dist[cell] + 1
                    queue.append(nxt)
        return dist


class DelayChain:
    """Binary actions over H steps; only the final step pays off.

    The hidden per-episode pattern is part of the state (so the process
    stays Markov), together with the normalized step index and the
    running match count. The final reward equals the number of actions
    that matched the pattern.
    """

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.h = spec.horizon
        self.state_dim = self.h + 2
        self.action_space = DiscreteActions(n=2)
        self.reward_structure = "delayed"

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pattern = rng.integers(0, 2, size=self.h).astype(np.float64)
        return np.concatenate([pattern, [0.0, 0.0]])

    def step(self, state, action, rng: np.random.Generator):
        a = int(action)
        if a not in (0, 1):
            raise ValueError(f"delay_chain expects a binary action, got {action!r}")
        state = np.asarray(state, dtype=np.float64)
        pattern = state[: self.h]
        t = int(round(state[self.h] * self.h))
        matches = int(round(state[self.h + 1] * self.h))
        if a == int(pattern[t]):
            matches += 1
        t += 1
        done = t >= self.h
        nxt = np.concatenate([pattern, [t / self.h, matches / self.h]])
        return nxt, (float(matches) if done else 0.0), done


_ENV_CLASSES = {"point_reach": PointReach, "grid_goal": GridGoal, "delay_chain": DelayChain}


def make_env(spec: EnvSpec):
    return _ENV_CLASSES[spec.name](spec)


def env_step(spec: EnvSpec, state, action, rng: np.random.Generator):
    """Functional single transition for ``spec``; see the env classes for dynamics."""
    return make_env(spec).step(state, action, rng)


# ---------------------------------------------------------------------------
# behavior policies


class _Expert:
    label = "expert"

    def __init__(self, env):
        self.env = env

    def action(self, state, rng: np.random.Generator):
        env = self.env
        if isinstance(env, PointReach):
            return env.goal - state  # proportional controller, gain 1.0
        if isinstance(env, GridGoal):
            pos, goal = env.decode(np.asarray(state, dtype=np.float64))
            dist = env.shortest_path_distances(goal)
            best_a, best_d = 0, dist.get(pos, np.inf)
            for a, (dx, dy) in enumerate(env.MOVES):
                nxt = (pos[0] + dx, pos[1] + dy)
                d = dist.get(nxt, np.inf)
                if d < best_d:
                    best_a, best_d = a, d
            return best_a
        if isinstance(env, DelayChain):
            t = int(round(state[env.h] * env.h))
            return int(state[t])
        raise TypeError(f"no expert for {type(env).__name__}")


class _Random:
    label = "random"

    def __init__(self, env):
        self.env = env

    def action(self, state, rng: np.random.Generator):
        space = self.env.action_space
        if isinstance(space, ContinuousActions):
            return rng.uniform(space.low, space.high, size=space.dim)
        return int(rng.integers(space.n))


class _EpsilonExpert:
    label = "epsilon_expert"

    def __init__(self, env, epsilon: float):
        self.expert = _Expert(env)
        self.rand = _Random(env)
        self.epsilon = epsilon

    def action(self, state, rng: np.random.Generator):
        if rng.random() < self.epsilon:
            return self.rand.action(state, rng)
        return self.expert.action(state, rng)


class _Medium:
    """A deliberately weaker controller per env: halved gain with action noise
    for point_reach, epsilon-greedy shortest path for grid_goal, and a noisy
    pattern-follower for delay_chain."""

    label = "medium"

    def __init__(self, env):
        self.env = env
        if isinstance(env, GridGoal):
            self._impl = _EpsilonExpert(env, 0.4)
        elif isinstance(env, DelayChain):
            self._impl = _EpsilonExpert(env, 0.5)
        else:
            self._impl = None

    def action(self, state, rng: np.random.Generator):
        if isinstance(self.env, PointReach):
            return 0.5 * (self.env.goal - state) + rng.normal(0.0, 0.3, size=2)
        return self._impl.action(state, rng)


def make_policy(kind: str, env, epsilon: float = 0.1):
    if kind == "expert":
        return _Expert(env)
    if kind == "medium":
        return _Medium(env)
    if kind == "random":
        return _Random(env)
    if kind == "epsilon_expert":
        return _EpsilonExpert(env, epsilon)
    raise ValueError(f"unknown policy kind {kind!r}; choose from {POLICY_KINDS}")


def rollout(spec: EnvSpec, policy, rng: np.random.Generator, env=None) -> Trajectory:
    """Run one full episode; terminal handling keeps ``T <= horizon``."""
    env = env if env is not None else make_env(spec)
    state = env.reset(rng)
    states, actions, rewards = [], [], []
    for _ in range(spec.horizon):
        raw = policy.action(state, rng)
        if isinstance(env.action_space, ContinuousActions):
            executed = env.action_space.clip(raw)
        else:
            executed = int(raw)
        nxt, reward, done = env.step(state, raw, rng)
        states.append(state)
        actions.append(executed)
        rewards.append(reward)
        state = nxt
        if done:
            break
    label = getattr(policy, "label", "")
    return make_trajectory(np.array(states), np.array(actions), np.array(rewards), label)


def _mixture_counts(policy_mix: dict[str, float], n_episodes: int) -> dict[str, int]:
    total = sum(policy_mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"policy mix weights must sum to 1, got {total}")
    counts = {k: int(np.floor(w * n_episodes)) for k, w in policy_mix.items()}
    remainder = n_episodes - sum(counts.values())
    by_frac = sorted(
        policy_mix, key=lambda k: (policy_mix[k] * n_episodes) - counts[k], reverse=True
    )
    for k in by_frac[:remainder]:
        counts[k] += 1
    return counts


def generate_dataset(
    spec: EnvSpec,
    policy_mix: dict[str, float],
    n_episodes: int,
    seed: int,
    epsilon: float = 0.1,
) -> Dataset:
    """Roll out a graded mixture of behavior policies into an offline dataset.

    Episode counts per policy follow the mixture weights exactly (largest
    remainder rounding). The same seed regenerates a bit-identical dataset.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    for kind in policy_mix:
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {kind!r} in mix; choose from {POLICY_KINDS}")
    env = make_env(spec)
    counts = _mixture_counts(policy_mix, n_episodes)
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_episodes)
    trajs: list[Trajectory] = []
    episode = 0
    for kind in policy_mix:
        policy = make_policy(kind, env, epsilon)
        for _ in range(counts[kind]):
            rng = np.random.Generator(np.random.PCG64(children[episode]))
            trajs.append(rollout(spec, policy, rng, env=env))
            episode += 1
    meta = {
        "env": spec.to_dict(),
        "seed": seed,
        "policy_mix": dict(policy_mix),
        "epsilon": epsilon,
        "counts_by_label": counts,
        "state_dim": env.state_dim,
        "action_space": env.action_space.to_dict(),
    }
    dataset = Dataset(trajs, meta)
    dataset.stats = compute_state_stats(dataset)
    return dataset
