"""Prior, posterior and posterior-informed latent rollouts.

Indexing convention: ``actions[t]`` is the action that moves the
environment into the state observed at step ``t``, so the ground truth for
a rollout started at ``s0`` is ``env.replay(s0, actions)``. Actions come
from the policy evaluated on the model's own decoded physical state of the
previous belief, which keeps prior rollouts free of observations.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from latentdiag.core import gjs_uncertainty
from latentdiag.ensemble import LatentEnsemble
from latentdiag.envs import EnvConfig, Environment, make_env, ood_state
from latentdiag.rssm import RSSM, BeliefState

KINDS = ("prior", "posterior", "posterior-informed")


@dataclass(frozen=True)
class RolloutSpec:
    kind: str = "prior"
    horizon: int = 50
    warmup: int = 3
    policy: str = "scripted"
    noise: float = 0.3
    start: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rollout kind {self.kind!r}; expected one of {KINDS}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 0 <= self.warmup <= self.horizon:
            raise ValueError(f"warm-up {self.warmup} must lie in [0, horizon={self.horizon}]")
        if self.policy not in ("scripted", "random"):
            raise ValueError(f"unknown rollout policy {self.policy!r}")
        if not (self.start in ("random", "id") or self.start.startswith("ood:")):
            raise ValueError(f"start must be random, id or ood:<name>, got {self.start!r}")


@dataclass
class LatentTrajectory:
    kind: str
    start_state: np.ndarray
    actions: np.ndarray
    h: np.ndarray
    z: np.ndarray
    z_feature: np.ndarray
    reward_pred: np.ndarray
    phys_pred: np.ndarray
    uncertainty: np.ndarray
    warmup: np.ndarray
    observations_used: int = 0
    rollout_id: int = 0
    refreshed_h: np.ndarray | None = None
    refreshed_z_feature: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def features(self) -> np.ndarray:
        """``f_t = (h_t, z^m_t)``: deterministic state and stochastic mean or mode."""
        return np.concatenate([self.h, self.z_feature], axis=1)

    def warmup_slice(self) -> slice:
        return slice(0, int(self.warmup.sum()))


def rollout_rngs(seed: int, rollout_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (start, dynamics) streams for one rollout id."""
    start, dyn = np.random.SeedSequence([seed, rollout_id]).spawn(2)
    return np.random.default_rng(start), np.random.default_rng(dyn)


def resolve_start(env: Environment, spec: RolloutSpec, rng: np.random.Generator,
                  id_state: np.ndarray | None = None) -> np.ndarray:
    if spec.start == "random":
        return env.sample_initial(rng)
    if spec.start == "id":
        if id_state is None:
            raise ValueError("an ID start needs the selected ID state")
        return np.asarray(id_state, dtype=float)
    return ood_state(env, spec.start.split(":", 1)[1])


def _policy(env: Environment, model: RSSM, belief: BeliefState, spec: RolloutSpec,
            rng: np.random.Generator) -> np.ndarray:
    m = env.action_dim
    if spec.policy == "random":
        return rng.uniform(-1.0, 1.0, size=m)
    est = env.decode_physical(model.decode_physical(belief).mean[0].numpy())
    a = env.scripted_action(est)
    if spec.noise > 0:
        a = a + rng.normal(0.0, spec.noise, size=m)
    return np.clip(a, -1.0, 1.0)


def run_rollout(model: RSSM, ens: LatentEnsemble | None, env: Environment, spec: RolloutSpec,
                s0, rng: np.random.Generator, rollout_id: int = 0) -> LatentTrajectory:
    """Single rollout of any kind from physical start ``s0``."""
    T, W = spec.horizon, spec.warmup
    dt = model.dtype
    s0 = env.validate_state(s0)
    reads0 = env.observation_reads
    env.reset_to_state(s0)
    H, Z, P = model.cfg.deter, model.cfg.stoch_dim, model.phys_dim
    rec = {
        "h": np.zeros((T, H)), "z": np.zeros((T, Z)), "zf": np.zeros((T, Z)),
        "r": np.zeros(T), "p": np.zeros((T, P)), "u": np.full(T, np.nan),
        "a": np.zeros((T, env.action_dim)),
    }
    refreshed_h = refreshed_zf = None
    if spec.kind == "posterior-informed":
        refreshed_h = np.full((T, H), np.nan)
        refreshed_zf = np.full((T, Z), np.nan)

    def obs_tensor(o):
        return torch.as_tensor(o[None], dtype=dt)

    with torch.no_grad():
        belief = model.init_belief((1,))
        for t in range(T):
            a_np = _policy(env, model, belief, spec, rng)
            a = torch.as_tensor(a_np[None], dtype=dt)
            rec["a"][t] = a_np
            if t < W or spec.kind == "posterior":
                _, o, _ = env.step(a_np, rng)
                belief, _, _ = model.filter_step(belief, a, obs_tensor(o), model.noise(rng, (1,)))
                current = belief
            else:
                if ens is not None:
                    rec["u"][t] = float(gjs_uncertainty(ens.predict(belief.h, belief.z, a))[0])
                current, _ = model.imagine_step(belief, a, model.noise(rng, (1,)))
                if spec.kind == "prior":
                    belief = current
                elif t < T - 1:
                    _, o, _ = env.step(a_np, rng)
                    post = model.posterior(current.h, obs_tensor(o))
                    z, feat = model.sample(post, model.noise(rng, (1,)))
                    belief = BeliefState(current.h, z, feat)
                    refreshed_h[t] = belief.h[0].numpy()
                    refreshed_zf[t] = feat[0].numpy()
            rec["h"][t] = current.h[0].numpy()
            rec["z"][t] = current.z[0].numpy()
            rec["zf"][t] = current.z_feature[0].numpy()
            rec["r"][t] = float(model.decode_reward(current).mean[0, 0])
            rec["p"][t] = model.decode_physical(current).mean[0].numpy()
    return LatentTrajectory(
        kind=spec.kind, start_state=s0, actions=rec["a"], h=rec["h"], z=rec["z"],
        z_feature=rec["zf"], reward_pred=rec["r"], phys_pred=rec["p"], uncertainty=rec["u"],
        warmup=np.arange(T) < W, observations_used=env.observation_reads - reads0,
        rollout_id=rollout_id, refreshed_h=refreshed_h, refreshed_z_feature=refreshed_zf,
    )


def _checked(spec: RolloutSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"spec.kind is {spec.kind!r}, expected {kind!r}")


def _single(model, ens, env, spec, rng, s0, id_state, rollout_id):
    if rng is None:
        rng_start, rng = rollout_rngs(spec.seed, rollout_id)
    else:
        rng_start = rng
    if s0 is None:
        s0 = resolve_start(env, spec, rng_start, id_state)
    return run_rollout(model, ens, env, spec, s0, rng, rollout_id)


def prior_rollout(model: RSSM, ens: LatentEnsemble | None, env: Environment, spec: RolloutSpec,
                  rng: np.random.Generator | None = None, s0=None, id_state=None,
                  rollout_id: int = 0) -> LatentTrajectory:
    """Warm-up with observations, then transitions from the prior head only."""
    _checked(spec, "prior")
    return _single(model, ens, env, spec, rng, s0, id_state, rollout_id)


def posterior_rollout(model: RSSM, env: Environment, spec: RolloutSpec,
                      rng: np.random.Generator | None = None, s0=None, id_state=None,
                      rollout_id: int = 0) -> LatentTrajectory:
    """Every step consumes the real observation."""
    _checked(spec, "posterior")
    return _single(model, None, env, spec, rng, s0, id_state, rollout_id)


def posterior_informed_rollout(model: RSSM, env: Environment, spec: RolloutSpec,
                               rng: np.random.Generator | None = None, s0=None, id_state=None,
                               rollout_id: int = 0, ens: LatentEnsemble | None = None) -> LatentTrajectory:
    """One-step prior predictions from posterior-refreshed beliefs."""
    _checked(spec, "posterior-informed")
    return _single(model, ens, env, spec, rng, s0, id_state, rollout_id)


# --------------------------------------------------------------------------
# Batches
# --------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(model, ens, env_cfg, spec, s0, id_state):
    torch.set_num_threads(1)
    _WORKER.update(model=model, ens=ens, env=make_env(env_cfg), spec=spec, s0=s0, id_state=id_state)


def _run_ids(ids: list[int]) -> list[LatentTrajectory]:
    w = _WORKER
    return [_single(w["model"], w["ens"], w["env"], w["spec"], None, w["s0"], w["id_state"], i) for i in ids]


def batch_rollouts(model: RSSM, ens: LatentEnsemble | None, env_cfg: EnvConfig, spec: RolloutSpec,
                   count: int = 1000, workers: int = 1, s0=None, id_state=None,
                   first_id: int = 0) -> list[LatentTrajectory]:
    """``count`` independently seeded rollouts, ordered by rollout id.

    Rollout ``i`` draws from streams derived from ``(spec.seed, i)`` only, so
    results do not depend on how ids are split over workers.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    ids = list(range(first_id, first_id + count))
    threads = torch.get_num_threads()
    if workers <= 1:
        torch.set_num_threads(1)
        try:
            _init_worker(model, ens, env_cfg, spec, s0, id_state)
            return _run_ids(ids)
        finally:
            _WORKER.clear()
            torch.set_num_threads(threads)
    chunks = [c.tolist() for c in np.array_split(np.array(ids), workers) if len(c)]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(model, ens, env_cfg, spec, s0, id_state)) as pool:
        parts = list(pool.map(_run_ids, chunks))
    return [traj for part in parts for traj in part]
