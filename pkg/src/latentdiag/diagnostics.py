"""Measurement suite over latent trajectories.

Start-state selection, physical and reward discrepancy against a
ground-truth replay, PCA embeddings with binned displacement fields, and
distances to a reference set of posterior latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from latentdiag.envs import Environment, circular_distance
from latentdiag.rollouts import LatentTrajectory

STD_FLOOR = 1e-8


# --------------------------------------------------------------------------
# ID start selection
# --------------------------------------------------------------------------

def knn_mean_distances(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Mean Euclidean distance of every point to its ``k`` nearest others."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        block = points[lo:lo + chunk]
        d = np.sqrt(((block[:, None, :] - points[None, :, :]) ** 2).sum(-1))
        rows = np.arange(len(block))
        d[rows, lo + rows] = np.inf
        nearest = np.sort(np.partition(d, k - 1, axis=1)[:, :k], axis=1)
        out[lo:lo + len(block)] = nearest.mean(1)
    return out


def select_id_index(points: np.ndarray, k: int = 100) -> int:
    """Index of the densest point; ties go to the lowest index."""
    n = len(points)
    if n <= k:
        raise ValueError(f"need more than k={k} states, got {n}")
    return int(np.argmin(knn_mean_distances(points, k)))


def select_id_state(buffer, env: Environment, k: int = 100) -> np.ndarray:
    """Densest stored physical state, measured on the angle-encoded state."""
    states = buffer.states() if hasattr(buffer, "states") else np.asarray(buffer)
    idx = select_id_index(env.encode_physical(states), k)
    return states[idx].copy()


def best_seed(validation_elbos: dict[int, float]) -> int:
    """Seed with the lowest held-out negative ELBO."""
    return min(sorted(validation_elbos), key=lambda s: validation_elbos[s])


# --------------------------------------------------------------------------
# Discrepancies
# --------------------------------------------------------------------------

def l1_discrepancy(pred, truth, angle_mask) -> np.ndarray:
    """Per-step mean absolute difference; angular components on the circle."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    mask = np.asarray(angle_mask, dtype=bool)
    diff = np.abs(pred - truth)
    diff[:, mask] = circular_distance(pred[:, mask], truth[:, mask])
    return diff.mean(axis=1)


def _compared(env: Environment) -> tuple[np.ndarray, np.ndarray]:
    """Indices into decoded components that are positions, and their angle flags."""
    kept = env.kept_components()
    pos = [i for i, c in enumerate(kept) if env.position_mask[env.components.index(c)]]
    angles = np.array([env.angle_mask[env.components.index(kept[i])] for i in pos])
    return np.array(pos), angles


def _truth(traj: LatentTrajectory, env: Environment, s0) -> tuple[np.ndarray, np.ndarray]:
    s0 = traj.start_state if s0 is None else s0
    states, rewards = env.replay(s0, traj.actions)
    if len(states) != len(traj):
        raise ValueError("horizon mismatch between trajectory and replay")
    return states, rewards


def physical_discrepancy(traj: LatentTrajectory, env: Environment, s0=None,
                         truth_states: np.ndarray | None = None) -> np.ndarray:
    """Mean l1 distance of decoded predicted positions to the replayed truth.

    The cart/body x-position is excluded because the decoder never sees it.
    """
    if truth_states is None:
        truth_states, _ = _truth(traj, env, s0)
    elif len(truth_states) != len(traj):
        raise ValueError("horizon mismatch between trajectory and truth")
    pos, angles = _compared(env)
    decoded = env.decode_physical(traj.phys_pred)[:, pos]
    keep = [env.components.index(c) for c in env.kept_components()]
    truth = np.asarray(truth_states)[:, keep][:, pos]
    return l1_discrepancy(decoded, truth, angles)


def reward_discrepancy(traj: LatentTrajectory, env: Environment, s0=None,
                       truth_rewards: np.ndarray | None = None) -> np.ndarray:
    """Signed ``r_pred - r_sim``; positive means the model overestimates."""
    if truth_rewards is None:
        _, truth_rewards = _truth(traj, env, s0)
    elif len(truth_rewards) != len(traj):
        raise ValueError("horizon mismatch between trajectory and truth")
    return traj.reward_pred - np.asarray(truth_rewards)


# --------------------------------------------------------------------------
# Embedding and vector fields
# --------------------------------------------------------------------------

@dataclass
class EmbeddingModel:
    mean: np.ndarray
    std: np.ndarray
    axes: np.ndarray  # (2, d), orthonormal rows
    explained_variance: np.ndarray
    explained_ratio: np.ndarray

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) / self.std

    def project(self, features: np.ndarray) -> np.ndarray:
        return self.normalize(features) @ self.axes.T


def _orient(axes: np.ndarray) -> np.ndarray:
    """Flip each axis so its largest-magnitude loading is positive."""
    axes = axes.copy()
    for i, ax in enumerate(axes):
        if ax[np.argmax(np.abs(ax))] < 0:
            axes[i] = -ax
    return axes


def fit_embedding_features(features: np.ndarray) -> EmbeddingModel:
    X = np.asarray(features, dtype=float)
    mean = X.mean(0)
    std = np.maximum(X.std(0), STD_FLOOR)
    Xn = (X - mean) / std
    cov = Xn.T @ Xn / max(len(Xn) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    top = np.clip(evals[order], 0.0, None)
    axes = evecs[:, order].T
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], X.shape[1]))])
        top = np.concatenate([top, np.zeros(2 - len(top))])
    total = max(float(np.clip(evals, 0.0, None).sum()), STD_FLOOR)
    return EmbeddingModel(mean, std, _orient(axes), top, top / total)


def fit_embedding(trajs: Sequence[LatentTrajectory]) -> EmbeddingModel:
    """Z-score the features ``(h, z^m)`` over all steps and keep the top-2 PCA axes."""
    if len(trajs) < 3:
        raise ValueError("fit_embedding needs at least 3 trajectories")
    return fit_embedding_features(np.concatenate([t.features() for t in trajs]))


@dataclass
class VectorField:
    x_edges: np.ndarray
    y_edges: np.ndarray
    mean: np.ndarray  # (nx, ny, 2)
    counts: np.ndarray  # (nx, ny)

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


def _box(points: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = points.min(0), points.max(0)
    span = hi - lo
    pad = np.where(span > 0, margin * span, 0.5)
    return lo - pad, hi + pad


def vector_field_from_paths(paths: Sequence[np.ndarray], bins: tuple[int, int] = (40, 40),
                            margin: float = 0.05, box=None) -> VectorField:
    """Bin one-step displacements of 2-D paths at their midpoints."""
    mids, disps = [], []
    for p in paths:
        p = np.asarray(p, dtype=float)
        if len(p) < 2:
            continue
        mids.append(0.5 * (p[1:] + p[:-1]))
        disps.append(p[1:] - p[:-1])
    if not mids:
        raise ValueError("no transitions to bin")
    mids = np.concatenate(mids)
    disps = np.concatenate(disps)
    lo, hi = box if box is not None else _box(np.concatenate([np.asarray(p) for p in paths]), margin)
    nx, ny = bins
    x_edges = np.linspace(lo[0], hi[0], nx + 1)
    y_edges = np.linspace(lo[1], hi[1], ny + 1)
    ix = np.clip(((mids[:, 0] - lo[0]) / (hi[0] - lo[0]) * nx).astype(int), 0, nx - 1)
    iy = np.clip(((mids[:, 1] - lo[1]) / (hi[1] - lo[1]) * ny).astype(int), 0, ny - 1)
    counts = np.zeros((nx, ny), dtype=np.int64)
    sums = np.zeros((nx, ny, 2))
    np.add.at(counts, (ix, iy), 1)
    np.add.at(sums, (ix, iy), disps)
    mean = np.zeros_like(sums)
    nonempty = counts > 0
    mean[nonempty] = sums[nonempty] / counts[nonempty][:, None]
    return VectorField(x_edges, y_edges, mean, counts)


def build_vector_field(emb: EmbeddingModel, trajs: Sequence[LatentTrajectory],
                       bins: tuple[int, int] = (40, 40), margin: float = 0.05) -> VectorField:
    return vector_field_from_paths([emb.project(t.features()) for t in trajs], bins, margin)


# --------------------------------------------------------------------------
# Attractor distance
# --------------------------------------------------------------------------

@dataclass
class ReferenceSet:
    """Normalized posterior features that define well-represented regions."""

    points: np.ndarray

    @classmethod
    def from_trajectories(cls, trajs: Sequence[LatentTrajectory], emb: EmbeddingModel) -> "ReferenceSet":
        if not trajs:
            raise ValueError("empty reference set")
        return cls(emb.normalize(np.concatenate([t.features() for t in trajs])))


def nearest_distance(queries: np.ndarray, reference: np.ndarray, chunk: int = 256) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    reference = np.asarray(reference, dtype=float)
    if len(reference) == 0:
        raise ValueError("empty reference set")
    ref_sq = (reference**2).sum(1)
    out = np.empty(len(queries))
    for lo in range(0, len(queries), chunk):
        q = queries[lo:lo + chunk]
        d2 = (q**2).sum(1)[:, None] + ref_sq[None, :] - 2.0 * q @ reference.T
        j = np.argmin(d2, axis=1)
        # exact distance to the chosen neighbour avoids cancellation error
        out[lo:lo + len(q)] = np.sqrt(((q - reference[j]) ** 2).sum(1))
    return out


def attractor_distance(traj: LatentTrajectory, reference: ReferenceSet, emb: EmbeddingModel) -> np.ndarray:
    """Per-step distance of normalized ``f_t`` to the nearest reference point."""
    return nearest_distance(emb.normalize(traj.features()), reference.points)


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------

@dataclass
class DiscrepancyTrace:
    mean: np.ndarray
    std: np.ndarray
    runs: int

    def rows(self):
        for t, (m, s) in enumerate(zip(self.mean, self.std)):
            yield t, m, s


def aggregate_traces(runs: Sequence[np.ndarray]) -> DiscrepancyTrace:
    """Per-step mean and population standard deviation across runs."""
    if len(runs) == 0:
        raise ValueError("aggregate_traces needs at least one run")
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ValueError(f"runs have different lengths: {sorted(lengths)}")
    arr = np.stack([np.asarray(r, dtype=float) for r in runs])
    return DiscrepancyTrace(arr.mean(0), arr.std(0), len(runs))


def slope(values: np.ndarray, t: np.ndarray | None = None) -> float:
    """Least-squares slope of ``values`` over ``t``."""
    values = np.asarray(values, dtype=float)
    t = np.arange(len(values), dtype=float) if t is None else np.asarray(t, dtype=float)
    return float(np.polyfit(t, values, 1)[0])
