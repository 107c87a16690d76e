import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdiag.diagnostics import (
    ReferenceSet,
    aggregate_traces,
    attractor_distance,
    best_seed,
    build_vector_field,
    fit_embedding,
    fit_embedding_features,
    l1_discrepancy,
    physical_discrepancy,
    reward_discrepancy,
    select_id_index,
    select_id_state,
    slope,
    vector_field_from_paths,
)
from latentdiag.envs import EnvConfig, make_env
from latentdiag.rollouts import LatentTrajectory


def fake_traj(features=None, phys=None, reward=None, T=None, actions=None, s0=(0.5, 0.0), split=None):
    if T is None:
        T = len(features if features is not None else phys)
    if features is None:
        features = np.zeros((T, 2))
    split = features.shape[1] // 2 if split is None else split
    return LatentTrajectory(
        kind="prior", start_state=np.asarray(s0, dtype=float),
        actions=np.zeros((T, 1)) if actions is None else actions,
        h=features[:, :split], z=features[:, split:], z_feature=features[:, split:],
        reward_pred=np.zeros(T) if reward is None else reward,
        phys_pred=np.zeros((T, 3)) if phys is None else phys,
        uncertainty=np.full(T, np.nan), warmup=np.arange(T) < 1,
    )


def brute_force_id(points, k):
    n = len(points)
    d = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
    scores = []
    for i in range(n):
        others = np.sort(np.delete(d[i], i))[:k]
        scores.append(others.mean())
    return int(np.argmin(scores))


# ---- ID selection -----------------------------------------------------------

def test_select_id_identical_states():
    states = np.tile([[0.3, 0.1]], (150, 1))
    assert select_id_index(states, 100) == 0


def test_select_id_cluster_vs_outliers():
    rng = np.random.default_rng(0)
    cluster = rng.normal(0, 0.05, size=(200, 2))
    outliers = rng.uniform(-5, 5, size=(50, 2))
    pts = np.concatenate([outliers[:25], cluster, outliers[25:]])
    idx = select_id_index(pts, 100)
    assert 25 <= idx < 225
    assert idx == brute_force_id(pts, 100)


@pytest.mark.parametrize("n,d,k", [(300, 2, 100), (2000, 3, 100), (501, 5, 7)])
def test_select_id_matches_brute_force(n, d, k):
    rng = np.random.default_rng(n)
    pts = rng.normal(size=(n, d)) * rng.uniform(0.5, 2, size=d)
    assert select_id_index(pts, k) == brute_force_id(pts, k)


def test_select_id_needs_more_than_k():
    with pytest.raises(ValueError):
        select_id_index(np.zeros((100, 2)), 100)


def test_select_id_state_on_env_states():
    env = make_env(EnvConfig())
    rng = np.random.default_rng(0)
    states = np.stack([rng.uniform(-math.pi, math.pi, 400), rng.normal(size=400)], axis=1)
    s = select_id_state(states, env, k=100)
    enc = env.encode_physical(states)
    assert np.array_equal(s, states[brute_force_id(enc, 100)])


def test_best_seed():
    assert best_seed({0: 5.0, 1: 3.0, 2: 3.0}) == 1


# ---- discrepancies ----------------------------------------------------------

def test_physical_discrepancy_identity_offset_and_wrap():
    env = make_env(EnvConfig())
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, size=(20, 1))
    s0 = np.array([0.4, 0.0])
    states, rewards = env.replay(s0, actions)
    exact = fake_traj(phys=env.encode_physical(states), actions=actions, s0=s0)
    # arctan2 round trip is exact to ~1e-16
    assert np.allclose(physical_discrepancy(exact, env), 0.0, atol=1e-12)
    assert np.array_equal(reward_discrepancy(fake_traj(phys=exact.phys_pred, reward=rewards, actions=actions, s0=s0),
                                             env), np.zeros(20))
    over = fake_traj(phys=exact.phys_pred, reward=rewards + 0.1, actions=actions, s0=s0)
    assert np.allclose(reward_discrepancy(over, env), 0.1)


def test_l1_offset_and_circular_wrap():
    truth = np.zeros((5, 2))
    pred = truth.copy()
    pred[:, 1] += 0.3
    assert np.allclose(l1_discrepancy(pred, truth, [False, False]), 0.15)
    d = l1_discrepancy([[math.pi - 0.01]], [[-math.pi + 0.01]], [True])
    assert d[0] == pytest.approx(0.02)
    with pytest.raises(ValueError):
        l1_discrepancy(np.zeros((2, 2)), np.zeros((3, 2)), [False, False])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_l1_is_pseudometric(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-4, 4, size=(6, 3))
    b = rng.uniform(-4, 4, size=(6, 3))
    mask = [True, False, True]
    dab = l1_discrepancy(a, b, mask)
    assert np.all(dab >= 0)
    assert np.array_equal(dab, l1_discrepancy(b, a, mask))
    assert np.array_equal(l1_discrepancy(a, a, mask), np.zeros(6))


def test_cartpole_discrepancy_ignores_x_and_velocities():
    env = make_env(EnvConfig(env_id="cartpole"))
    s0 = np.array([0.0, math.pi, 0.0, 0.0])
    actions = np.zeros((4, 1))
    states, _ = env.replay(s0, actions)
    kept = env.encode_physical(states)[:, env.decoded_mask]
    pred = kept.copy()
    pred[:, 2:] += 5.0  # velocities are not positions
    tr = fake_traj(phys=pred, actions=actions, s0=s0)
    assert np.allclose(physical_discrepancy(tr, env), 0.0, atol=1e-12)


def test_horizon_mismatch():
    env = make_env(EnvConfig())
    with pytest.raises(ValueError):
        physical_discrepancy(fake_traj(phys=np.zeros((5, 3))), env, truth_states=np.zeros((4, 2)))


# ---- embedding ----------------------------------------------------------------

def test_embedding_line_in_3d():
    t = np.linspace(-1, 1, 200)[:, None]
    direction = np.array([1.0, 2.0, 3.0])
    X = t * direction
    emb = fit_embedding_features(X)
    # z-scoring makes every coordinate identical, so the axis is the diagonal
    assert np.allclose(np.abs(emb.axes[0]), 1 / math.sqrt(3))
    assert emb.explained_variance[1] < 1e-10


def test_embedding_isotropic_cloud():
    X = np.random.default_rng(0).normal(size=(10_000, 2))
    emb = fit_embedding_features(X)
    v = emb.explained_variance
    assert abs(v[0] - v[1]) / v[0] < 0.05


def test_embedding_matches_dense_eigendecomposition():
    rng = np.random.default_rng(1)
    d = 64
    X = rng.normal(size=(500, d)) @ rng.normal(size=(d, d))
    emb = fit_embedding_features(X)
    Xn = (X - X.mean(0)) / X.std(0)
    cov = np.cov(Xn, rowvar=False)
    evals, evecs = np.linalg.eig(cov)
    order = np.argsort(evals.real)[::-1][:2]
    axes = evecs[:, order].real.T
    ref = Xn @ axes.T
    got = emb.project(X)
    for i in range(2):
        sign = np.sign(np.dot(ref[:, i], got[:, i]))
        assert np.max(np.abs(got[:, i] - sign * ref[:, i])) < 1e-8


def test_embedding_refit_bit_identical():
    X = np.random.default_rng(2).normal(size=(300, 6))
    a, b = fit_embedding_features(X), fit_embedding_features(X.copy())
    assert np.array_equal(a.project(X), b.project(X))


def test_fit_embedding_needs_three():
    with pytest.raises(ValueError):
        fit_embedding([fake_traj(np.zeros((4, 2)))] * 2)


# ---- vector field -------------------------------------------------------------

def test_single_transition():
    vf = vector_field_from_paths([np.array([[0.0, 0.0], [1.0, 0.5]])], bins=(4, 4))
    assert vf.counts.sum() == 1 and (vf.counts > 0).sum() == 1
    i, j = np.argwhere(vf.counts)[0]
    assert np.array_equal(vf.mean[i, j], [1.0, 0.5])


def test_vector_field_totals_and_reversal():
    rng = np.random.default_rng(0)
    paths = [np.cumsum(rng.normal(size=(T, 2)), axis=0) for T in (10, 25, 7)]
    vf = vector_field_from_paths(paths, bins=(8, 8))
    assert vf.counts.sum() == 9 + 24 + 6
    rev = vector_field_from_paths([p[::-1] for p in paths], bins=(8, 8))
    assert np.array_equal(rev.counts, vf.counts)
    assert np.allclose(rev.mean, -vf.mean)
    coarse = vector_field_from_paths(paths, bins=(3, 5))
    assert coarse.counts.sum() == vf.counts.sum()


def test_build_vector_field_from_trajectories():
    rng = np.random.default_rng(1)
    trajs = [fake_traj(rng.normal(size=(12, 6))) for _ in range(5)]
    emb = fit_embedding(trajs)
    vf = build_vector_field(emb, trajs, bins=(40, 40))
    assert vf.shape == (40, 40)
    assert vf.counts.sum() == 5 * 11


# ---- attractor distance -------------------------------------------------------

def test_attractor_distance_zero_on_reference():
    rng = np.random.default_rng(0)
    trajs = [fake_traj(rng.normal(size=(10, 4))) for _ in range(4)]
    emb = fit_embedding(trajs)
    ref = ReferenceSet.from_trajectories(trajs, emb)
    assert np.allclose(attractor_distance(trajs[2], ref, emb), 0.0, atol=1e-12)


def test_attractor_distance_known_offset():
    from latentdiag.diagnostics import EmbeddingModel

    emb = EmbeddingModel(np.zeros(2), np.ones(2), np.eye(2), np.ones(2), np.full(2, 0.5))
    ref = ReferenceSet(np.array([[1.0, 1.0]]))
    tr = fake_traj(np.array([[4.0, 5.0], [1.0, 1.0]]))
    assert np.allclose(attractor_distance(tr, ref, emb), [5.0, 0.0])


# ---- aggregation ----------------------------------------------------------------

def test_aggregate_traces():
    a = np.array([0.1, 0.7, 1.3])
    single = aggregate_traces([a])
    assert np.array_equal(single.std, np.zeros(3)) and single.runs == 1
    b = np.array([0.2, 0.9, 2.5])
    two = aggregate_traces([a, b])
    assert np.array_equal(two.mean, (a + b) / 2)
    with pytest.raises(ValueError):
        aggregate_traces([a, b[:2]])
    with pytest.raises(ValueError):
        aggregate_traces([])


def test_slope():
    assert slope(3.0 + 0.5 * np.arange(10)) == pytest.approx(0.5)
