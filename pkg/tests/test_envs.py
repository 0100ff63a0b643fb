import hashlib

import numpy as np
import pytest

from deskrl.data import write_dataset
from deskrl.envs import (
    ContinuousActions,
    DiscreteActions,
    EnvSpec,
    env_step,
    generate_dataset,
    make_env,
    make_policy,
    rollout,
)


def test_unknown_env_rejected():
    with pytest.raises(ValueError, match="unknown env"):
        EnvSpec(name="mystery")


# ---------------------------------------------------------------------------
# point_reach


def test_point_reach_at_goal_zero_action():
    env = make_env(EnvSpec("point_reach", noise_scale=0.0))
    state = np.zeros(2)
    nxt, reward, done = env.step(state, np.zeros(2), np.random.default_rng(0))
    assert abs(reward) < 1e-12
    assert done
    assert np.array_equal(nxt, state)


def test_point_reach_action_clipped_and_dim_checked():
    env = make_env(EnvSpec("point_reach"))
    nxt, _, _ = env.step(np.zeros(2), np.array([10.0, -10.0]), np.random.default_rng(0))
    assert np.allclose(nxt, [0.1, -0.1])
    with pytest.raises(ValueError, match="2-d action"):
        env.step(np.zeros(2), np.zeros(3), np.random.default_rng(0))


def test_point_reach_expert_monotone_distance():
    spec = EnvSpec("point_reach", noise_scale=0.0)
    env = make_env(spec)
    traj = rollout(spec, make_policy("expert", env), np.random.default_rng(4))
    dists = np.linalg.norm(traj.states, axis=1)
    assert np.all(np.diff(dists) <= 1e-12)


# ---------------------------------------------------------------------------
# grid_goal


def test_grid_goal_wall_blocks_and_reward_once():
    spec = EnvSpec("grid_goal", width=8, height=8)
    env = make_env(spec)
    # cell left of the wall column, moving right into the wall
    state = env.encode((3, 2), (7, 7))
    nxt, reward, done = env.step(state, 0, np.random.default_rng(0))
    assert np.array_equal(nxt, state)
    assert reward == 0.0 and not done


def test_grid_goal_reaching_goal_pays_one_and_ends():
    env = make_env(EnvSpec("grid_goal"))
    state = env.encode((6, 7), (7, 7))
    nxt, reward, done = env.step(state, 0, np.random.default_rng(0))
    assert reward == 1.0 and done
    pos, goal = env.decode(nxt)
    assert pos == goal


def test_grid_goal_total_episode_reward_in_01():
    spec = EnvSpec("grid_goal")
    env = make_env(spec)
    for seed in range(30):
        for kind in ("expert", "medium", "random"):
            traj = rollout(spec, make_policy(kind, env), np.random.default_rng(seed))
            assert traj.rewards.sum() in (0.0, 1.0)


def test_grid_goal_action_validation():
    env = make_env(EnvSpec("grid_goal"))
    with pytest.raises(ValueError, match="0..3"):
        env.step(env.encode((0, 0), (1, 1)), 7, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# delay_chain


def test_delay_chain_all_correct_scores_horizon():
    spec = EnvSpec("delay_chain", horizon=10)
    env = make_env(spec)
    rng = np.random.default_rng(3)
    state = env.reset(rng)
    pattern = state[:10].astype(int)
    rewards = []
    for t in range(10):
        state, r, done = env.step(state, int(pattern[t]), rng)
        rewards.append(r)
    assert rewards[:-1] == [0.0] * 9
    assert rewards[-1] == 10.0
    assert done


def test_delay_chain_reward_equals_match_count():
    spec = EnvSpec("delay_chain", horizon=8)
    env = make_env(spec)
    rng = np.random.default_rng(5)
    state = env.reset(rng)
    pattern = state[:8].astype(int)
    actions = rng.integers(0, 2, size=8)
    total = 0.0
    for t in range(8):
        state, r, _ = env.step(state, int(actions[t]), rng)
        total += r
    assert total == float(np.sum(actions == pattern))


def test_env_step_functional_wrapper():
    spec = EnvSpec("point_reach", noise_scale=0.0)
    nxt, reward, done = env_step(spec, np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.random.default_rng(0))
    assert np.allclose(nxt, [0.9, 0.0])


# ---------------------------------------------------------------------------
# rollouts and datasets


def test_rollout_deterministic_under_seed():
    spec = EnvSpec("point_reach", noise_scale=0.05)
    env = make_env(spec)
    a = rollout(spec, make_policy("medium", env), np.random.default_rng(7))
    b = rollout(spec, make_policy("medium", env), np.random.default_rng(7))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.rewards, b.rewards)


def test_random_policy_runs_to_horizon_unless_goal():
    spec = EnvSpec("point_reach", horizon=25)
    env = make_env(spec)
    traj = rollout(spec, make_policy("random", env), np.random.default_rng(11))
    final_dist = np.linalg.norm(traj.states[-1] + 0.1 * np.clip(traj.actions[-1], -1, 1))
    assert traj.length == 25 or final_dist < 0.05


def test_policy_grades_strictly_ordered_on_point_reach():
    spec = EnvSpec("point_reach", noise_scale=0.0)
    env = make_env(spec)
    means = {}
    for kind in ("expert", "medium", "random"):
        policy = make_policy(kind, env)
        # paired episodes: the same seed gives the same start state per kind
        returns = [rollout(spec, policy, np.random.default_rng(s)).total_return for s in range(100)]
        means[kind] = np.mean(returns)
    assert means["expert"] > means["medium"] > means["random"]


def test_expert_dataset_max_return_matches_direct_rollouts():
    spec = EnvSpec("point_reach", noise_scale=0.0, seed=21)
    ds = generate_dataset(spec, {"expert": 1.0}, 50, seed=21)
    env = make_env(spec)
    policy = make_policy("expert", env)
    # same seed stream as generate_dataset: SeedSequence children
    children = np.random.SeedSequence(21).spawn(50)
    direct = [
        rollout(spec, policy, np.random.Generator(np.random.PCG64(c))).total_return
        for c in children
    ]
    assert ds.max_return == max(direct)
    assert np.allclose(sorted(ds.returns()), sorted(direct))


def test_mixture_counts_exact_and_labeled():
    spec = EnvSpec("point_reach", seed=9)
    ds = generate_dataset(spec, {"expert": 0.5, "medium": 0.5}, 100, seed=9)
    labels = [t.policy_label for t in ds.trajectories]
    assert labels.count("expert") == 50
    assert labels.count("medium") == 50
    assert ds.meta["counts_by_label"] == {"expert": 50, "medium": 50}


def test_mixture_weights_must_sum_to_one():
    with pytest.raises(ValueError, match="sum to 1"):
        generate_dataset(EnvSpec("point_reach"), {"expert": 0.7, "random": 0.2}, 10, seed=0)


def test_generate_dataset_bit_identical_file(tmp_path):
    spec = EnvSpec("grid_goal", seed=4)

    def digest():
        ds = generate_dataset(spec, {"medium": 1.0}, 30, seed=4)
        path = tmp_path / "ds.jsonl"
        write_dataset(ds, path)
        return hashlib.sha256(path.read_bytes()).hexdigest()

    assert digest() == digest()


def test_epsilon_expert_policy_available():
    spec = EnvSpec("delay_chain", horizon=6)
    env = make_env(spec)
    traj = rollout(spec, make_policy("epsilon_expert", env, epsilon=0.0), np.random.default_rng(2))
    assert traj.rewards[-1] == 6.0  # epsilon 0 reduces to the expert


def test_action_spaces_exposed():
    assert make_env(EnvSpec("point_reach")).action_space == ContinuousActions(dim=2)
    assert make_env(EnvSpec("grid_goal")).action_space == DiscreteActions(n=4)
    assert make_env(EnvSpec("delay_chain")).action_space == DiscreteActions(n=2)
