import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdiag.envs import (
    EnvConfig,
    EnvNotReadyError,
    InvalidStateError,
    circular_distance,
    make_env,
    ood_state,
    reset,
    wrap_angle,
)


@pytest.fixture(params=["pendulum", "cartpole"])
def env_id(request):
    return request.param


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(env_id="acrobot")
    with pytest.raises(ValueError):
        EnvConfig(action_repeat=0)
    with pytest.raises(ValueError):
        EnvConfig(obs_noise=-1)


def test_pendulum_reset_distribution():
    env = make_env(EnvConfig())
    rng = np.random.default_rng(0)
    thetas = []
    for _ in range(10_000):
        s, _ = env.reset(rng)
        assert -math.pi < s[0] <= math.pi
        assert abs(s[1]) < 0.1
        thetas.append(s[0])
    counts, _ = np.histogram(thetas, bins=20, range=(-math.pi, math.pi))
    chi2 = ((counts - 500) ** 2 / 500).sum()
    assert chi2 < 36.19  # chi-squared 99th percentile, 19 dof


def test_reset_is_seeded(env_id):
    cfg = EnvConfig(env_id=env_id)
    _, s1, o1 = reset(cfg, np.random.default_rng(5))
    _, s2, o2 = reset(cfg, np.random.default_rng(5))
    assert np.array_equal(s1, s2) and np.array_equal(o1, o2)


def test_reset_to_state_roundtrip_and_validation(env_id):
    env = make_env(EnvConfig(env_id=env_id))
    name = sorted(env.ood_catalog)[0]
    s = ood_state(env, name)
    env.reset_to_state(s)
    assert np.array_equal(env.state, s)
    bad = s.copy()
    bad[0] = np.nan
    with pytest.raises(InvalidStateError):
        env.reset_to_state(bad)
    with pytest.raises(InvalidStateError):
        env.reset_to_state(s[:-1])


def test_out_of_bounds_state_names_bound():
    env = make_env(EnvConfig())
    with pytest.raises(InvalidStateError, match="omega"):
        env.reset_to_state([0.0, 100.0])


def test_unknown_ood_lists_catalog():
    env = make_env(EnvConfig())
    with pytest.raises(KeyError, match="hanging_fast"):
        ood_state(env, "nope")


def test_step_before_reset():
    with pytest.raises(EnvNotReadyError):
        make_env(EnvConfig()).step([0.0])


def test_upright_fixed_point():
    env = make_env(EnvConfig(obs_noise=0.0))
    env.reset_to_state([0.0, 0.0])
    s, _, r = env.step([0.0])
    assert np.allclose(s, 0.0, atol=1e-9)
    assert r == 1.0


def test_energy_conservation():
    env = make_env(EnvConfig(obs_noise=0.0))
    s0 = np.array([2.0, 0.5])
    env.reset_to_state(s0)
    e0 = env.energy(s0)
    for _ in range(1000):
        s, _, _ = env.step([0.0])
    assert abs(env.energy(s) - e0) / abs(e0) < 1e-4


def test_step_is_deterministic(env_id):
    cfg = EnvConfig(env_id=env_id)
    actions = np.random.default_rng(1).uniform(-1, 1, size=(50, 1))
    runs = []
    for _ in range(2):
        env = make_env(cfg)
        rng = np.random.default_rng(2)
        env.reset(rng)
        runs.append([env.step(a, rng) for a in actions])
    for (s1, o1, r1), (s2, o2, r2) in zip(*runs):
        assert np.array_equal(s1, s2) and np.array_equal(o1, o2) and r1 == r2


def test_action_clipping_counted():
    env = make_env(EnvConfig())
    env.reset(np.random.default_rng(0))
    env.step([0.5])
    assert env.clip_count == 0
    env.step([3.0])
    assert env.clip_count == 1


def test_replay_matches_step_loop(env_id):
    env = make_env(EnvConfig(env_id=env_id, obs_noise=0.0))
    rng = np.random.default_rng(4)
    s0, _ = env.reset(rng)
    actions = rng.uniform(-1, 1, size=(200, 1))
    states, rewards = env.replay(s0, actions)
    env.reset_to_state(s0)
    for t, a in enumerate(actions):
        s, _, r = env.step(a)
        assert np.array_equal(s, states[t])
        assert r == rewards[t]
    again = env.replay(s0, actions)
    assert np.array_equal(again[0], states) and np.array_equal(again[1], rewards)


def test_replay_empty():
    env = make_env(EnvConfig())
    states, rewards = env.replay([0.1, 0.0], np.zeros((0, 1)))
    assert states.shape == (0, 2) and rewards.shape == (0,)


def test_encode_physical():
    env = make_env(EnvConfig())
    assert np.allclose(env.encode_physical([0.0, 0.0])[:2], [0.0, 1.0])
    assert np.allclose(env.encode_physical([math.pi / 2, 0.0])[:2], [1.0, 0.0])
    thetas = np.random.default_rng(0).uniform(-math.pi, math.pi, size=(1000,))
    s = np.stack([thetas, np.zeros_like(thetas)], axis=1)
    back = env.decode_physical(env.encode_physical(s))
    assert np.max(np.abs(back[:, 0] - thetas)) < 1e-12


def test_cartpole_decoder_excludes_x():
    env = make_env(EnvConfig(env_id="cartpole"))
    assert env.kept_components() == ["theta", "x_dot", "theta_dot"]
    assert env.decoded_dim == env.encoded_dim - 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_idempotent(x):
    w = wrap_angle(x)
    assert -math.pi < w <= math.pi
    assert wrap_angle(w) == w


def test_circular_distance_wraps():
    assert circular_distance(math.pi - 0.01, -math.pi + 0.01) == pytest.approx(0.02)


def test_observation_map_fixed_by_seed():
    a = make_env(EnvConfig(obs_noise=0.0)).observe(np.array([0.3, 1.0]))
    b = make_env(EnvConfig(obs_noise=0.0)).observe(np.array([0.3, 1.0]))
    c = make_env(EnvConfig(obs_noise=0.0, seed=1)).observe(np.array([0.3, 1.0]))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (16,)


def test_scripted_controllers_swing_up(env_id):
    env = make_env(EnvConfig(env_id=env_id, obs_noise=0.0))
    rng = np.random.default_rng(0)
    s, _ = env.reset(rng)
    rewards = []
    for _ in range(500):
        s, _, r = env.step(env.scripted_action(s))
        rewards.append(r)
    assert np.mean(rewards[-100:]) > 0.9
