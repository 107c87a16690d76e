"""ELBO optimization, replay storage and the data-collection loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from latentdiag.core import (
    DiagonalGaussian,
    categorical_indices,
    kl_categorical,
    kl_diag_gaussian,
    resolve_dtype,
)
from latentdiag.ensemble import (
    EnsembleConfig,
    LatentEnsemble,
    PhysicalEnsemble,
    ensemble_train_step,
    latent_tuples,
    make_optimizer,
)
from latentdiag.envs import EnvConfig, Environment, make_env
from latentdiag.rssm import RSSM, BeliefState, RssmConfig, gaussian_nll

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "elbo", "recon_o", "recon_r", "recon_s", "kl", "grad_norm")


class InsufficientDataError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at train step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    grad_clip: float = 100.0
    batch_size: int = 50
    seq_len: int = 50
    init_episodes: int = 5
    collect_interval: int = 100
    exploration_noise: float = 0.3
    env_steps: int = 20000
    collect_policy: str = "scripted"
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.grad_clip) <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if min(self.batch_size, self.seq_len, self.collect_interval) < 1:
            raise ValueError("batch_size, seq_len and collect_interval must be positive")
        if self.init_episodes < 0 or self.env_steps < 0 or self.exploration_noise < 0:
            raise ValueError("init_episodes, env_steps and exploration_noise must be non-negative")
        if self.collect_policy not in POLICIES:
            raise ValueError(f"unknown policy {self.collect_policy!r}")
        resolve_dtype(self.precision)


POLICIES = ("random", "scripted", "prior-greedy")


# --------------------------------------------------------------------------
# Replay buffer
# --------------------------------------------------------------------------

@dataclass
class Episode:
    """Aligned per-step arrays. ``action[t]`` is the action that led to
    ``state[t]`` (zeros at reset); ``reward[t]`` was received on arrival."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    state: np.ndarray
    phys: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    def __post_init__(self):
        n = len(self.obs)
        if not all(len(x) == n for x in (self.action, self.reward, self.state, self.phys)):
            raise ValueError("episode sequences must have equal length")


@dataclass
class SequenceBatch:
    """``B`` subsequences of length ``L``; arrays are batch-major."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    phys: np.ndarray
    state: np.ndarray | None = None
    index: np.ndarray | None = None  # (episode, start) per row

    @property
    def shape(self) -> tuple[int, int]:
        return self.obs.shape[:2]


class ReplayBuffer:
    def __init__(self):
        self.episodes: list[Episode] = []

    def add(self, episode: Episode) -> None:
        self.episodes.append(episode)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def num_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def states(self) -> np.ndarray:
        return np.concatenate([ep.state for ep in self.episodes]) if self.episodes else np.zeros((0, 0))

    def _starts(self, length: int) -> np.ndarray:
        return np.array([max(len(ep) - length + 1, 0) for ep in self.episodes], dtype=np.int64)

    def sample_index(self, batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform over all valid subsequence starts, never crossing episodes."""
        counts = self._starts(length)
        total = int(counts.sum())
        if total == 0:
            raise InsufficientDataError(f"no episode holds a subsequence of length {length}")
        flat = rng.integers(0, total, size=batch)
        cum = np.cumsum(counts)
        ep = np.searchsorted(cum, flat, side="right")
        start = flat - (cum[ep] - counts[ep])
        return np.stack([ep, start], axis=1)

    def sample(self, batch: int, length: int, rng: np.random.Generator) -> SequenceBatch:
        index = self.sample_index(batch, length, rng)
        rows = [(self.episodes[e], s) for e, s in index]

        def take(attr):
            return np.stack([getattr(ep, attr)[s:s + length] for ep, s in rows])

        return SequenceBatch(take("obs"), take("action"), take("reward"), take("phys"), take("state"), index)

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(state_t, action_{t+1}, state_{t+1}) over all episodes, states raw."""
        s, a, s2 = [], [], []
        for ep in self.episodes:
            s.append(ep.state[:-1])
            a.append(ep.action[1:])
            s2.append(ep.state[1:])
        return np.concatenate(s), np.concatenate(a), np.concatenate(s2)


# --------------------------------------------------------------------------
# ELBO
# --------------------------------------------------------------------------

def _time_major(x: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.swapaxes(x, 0, 1)), dtype=dtype)


def draw_noise(model: RSSM, rng: np.random.Generator, batch: int, length: int) -> np.ndarray:
    """Time-major reparameterization noise for a whole batch."""
    return model.noise(rng, (length, batch))


@dataclass
class ElboOutput:
    loss: torch.Tensor
    terms: dict[str, torch.Tensor]
    h: torch.Tensor
    z: torch.Tensor
    actions: torch.Tensor
    anchors: list | None = None


def elbo_terms(model: RSSM, batch: SequenceBatch, noise: np.ndarray, anchors=None) -> ElboOutput:
    """Negative ELBO averaged over batch and time, with its breakdown.

    ``anchors`` (categorical only) freezes sampled indices and the
    straight-through offset; the anchors used are returned for reuse.
    """
    B, L = batch.shape
    if batch.obs.shape[-1] != model.obs_dim or batch.action.shape[-1] != model.action_dim \
            or batch.phys.shape[-1] != model.phys_dim:
        raise ValueError("batch and model dimensions disagree")
    dt = model.dtype
    obs = _time_major(batch.obs, dt)
    act = _time_major(batch.action, dt)
    rew = _time_major(batch.reward, dt).unsqueeze(-1)
    phys = _time_major(batch.phys, dt)
    embedded = model.embed_obs(obs)
    belief = model.init_belief((B,))
    hs, zs, kls = [], [], []
    used = [] if model.cfg.variant == "categorical" else None
    for t in range(L):
        h, prior = model.transition_prior(belief, act[t])
        post = model.posterior(h, obs[t], embedded[t])
        if isinstance(post, DiagonalGaussian):
            kls.append(kl_diag_gaussian(post, prior))
            z, feat = model.sample(post, noise[t])
        else:
            kls.append(kl_categorical(post, prior))
            if anchors is None:
                idx = categorical_indices(post, noise[t])
                anchor = (idx, post.probs.detach())
            else:
                anchor = anchors[t]
            used.append(anchor)
            z, feat = model.sample(post, None, anchor)
        belief = BeliefState(h, z, feat)
        hs.append(h)
        zs.append(z)
    h_all = torch.stack(hs)
    z_all = torch.stack(zs)
    beliefs = BeliefState(h_all, z_all, z_all)
    terms = {
        "recon_o": gaussian_nll(model.decode_observation(beliefs), obs).mean(),
        "recon_r": gaussian_nll(model.decode_reward(beliefs), rew).mean(),
        "recon_s": gaussian_nll(model.decode_physical(beliefs), phys).mean(),
        "kl": torch.stack(kls).mean(),
    }
    loss = terms["recon_o"] + terms["recon_r"] + terms["recon_s"] + terms["kl"]
    return ElboOutput(loss, terms, h_all, z_all, act, used)


def elbo_loss(batch: SequenceBatch, model: RSSM, rng: np.random.Generator) -> tuple[torch.Tensor, dict[str, float]]:
    B, L = batch.shape
    out = elbo_terms(model, batch, draw_noise(model, rng, B, L))
    breakdown = {k: float(v.detach()) for k, v in out.terms.items()}
    breakdown["elbo"] = float(out.loss.detach())
    return out.loss, breakdown


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------

def make_model_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


@dataclass
class StepResult:
    metrics: dict[str, float]
    output: ElboOutput


def train_step(buffer: ReplayBuffer, model: RSSM, opt: torch.optim.Optimizer, cfg: TrainConfig,
               rng: np.random.Generator, step: int = 0) -> StepResult:
    """Sample a batch, take one clipped Adam step on the negative ELBO."""
    batch = buffer.sample(cfg.batch_size, cfg.seq_len, rng)
    out = elbo_terms(model, batch, draw_noise(model, rng, cfg.batch_size, cfg.seq_len))
    if not torch.isfinite(out.loss):
        raise NumericError(step)
    opt.zero_grad()
    out.loss.backward()
    norm = float(nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
    if not math.isfinite(norm):
        raise NumericError(step, "gradient")
    opt.step()
    if not all(bool(torch.isfinite(p).all()) for p in model.parameters()):
        raise NumericError(step, "parameter update")
    metrics = {k: float(v.detach()) for k, v in out.terms.items()}
    metrics["elbo"] = float(out.loss.detach())
    metrics["grad_norm"] = min(norm, cfg.grad_clip)
    metrics["step"] = step
    return StepResult(metrics, out)


# --------------------------------------------------------------------------
# Data collection
# --------------------------------------------------------------------------

def noisy(action: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise > 0:
        action = action + rng.normal(0.0, noise, size=action.shape)
    return np.clip(action, -1.0, 1.0)


def prior_greedy_action(model: RSSM, belief: BeliefState, rng: np.random.Generator,
                        candidates: int = 16) -> np.ndarray:
    """Candidate action with the highest predicted reward one prior step ahead."""
    acts = rng.uniform(-1.0, 1.0, size=(candidates, model.action_dim))
    with torch.no_grad():
        a = torch.as_tensor(acts, dtype=model.dtype)
        rep = BeliefState(belief.h.expand(candidates, -1), belief.z.expand(candidates, -1),
                          belief.z_feature.expand(candidates, -1))
        h, prior = model.transition_prior(rep, a)
        z = prior.mean if isinstance(prior, DiagonalGaussian) else prior.mode().flatten(-2)
        r = model.decode_reward(BeliefState(h, z, z)).mean[:, 0]
    return acts[int(torch.argmax(r))]


def collect_episode(env: Environment, model: RSSM | None, policy: str, noise: float,
                    rng: np.random.Generator, buffer: ReplayBuffer | None = None) -> Episode:
    """Run one episode and store ``(o, a, r, s)`` per step."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    s, o = env.reset(rng)
    m = env.action_dim
    obs, acts, rews, states = [o], [np.zeros(m)], [env.reward(s, np.zeros(m))], [s]
    belief = None
    if policy == "prior-greedy":
        if model is None:
            raise ValueError("prior-greedy collection needs a model")
        with torch.no_grad():
            belief = model.init_belief((1,))
            belief, _, _ = model.filter_step(belief, torch.zeros(1, m, dtype=model.dtype),
                                             torch.as_tensor(o[None], dtype=model.dtype),
                                             model.noise(rng, (1,)))
    for _ in range(env.cfg.episode_length - 1):
        if policy == "random":
            a = rng.uniform(-1.0, 1.0, size=m)
        elif policy == "scripted":
            a = noisy(env.scripted_action(env.state), noise, rng)
        else:
            a = noisy(prior_greedy_action(model, belief, rng), noise, rng)
        s, o, r = env.step(a, rng)
        if belief is not None:
            with torch.no_grad():
                belief, _, _ = model.filter_step(belief, torch.as_tensor(a[None], dtype=model.dtype),
                                                 torch.as_tensor(o[None], dtype=model.dtype),
                                                 model.noise(rng, (1,)))
        obs.append(o)
        acts.append(a)
        rews.append(r)
        states.append(s)
    states_arr = np.array(states)
    ep = Episode(np.array(obs), np.array(acts), np.array(rews), states_arr,
                 env.encode_physical(states_arr)[:, env.decoded_mask])
    if buffer is not None:
        buffer.add(ep)
    return ep


# --------------------------------------------------------------------------
# Full loop
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    model: RSSM
    ensemble: LatentEnsemble
    pe: PhysicalEnsemble
    buffer: ReplayBuffer
    log: list[dict[str, float]] = field(default_factory=list)
    env_steps: int = 0
    validation_elbo: float = float("nan")


def build_model(env: Environment, rssm_cfg: RssmConfig, dtype, seed: int) -> RSSM:
    return RSSM(rssm_cfg, env.cfg.obs_dim, env.action_dim, env.decoded_dim, dtype=dtype, seed=seed)


def build_ensembles(env: Environment, model: RSSM, ens_cfg: EnsembleConfig, dtype, seed: int):
    latent = LatentEnsemble(model.cfg.deter, model.cfg.stoch_dim, env.action_dim, ens_cfg, seed=seed, dtype=dtype)
    pe = PhysicalEnsemble(env.encoded_dim, env.action_dim, env.state_scale_encoded, ens_cfg, seed=seed, dtype=dtype)
    return latent, pe


def validation_elbo(model: RSSM, env: Environment, cfg: TrainConfig, seed: int) -> float:
    """Negative ELBO on a held-out scripted episode (not added to the buffer)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    held = ReplayBuffer()
    collect_episode(env, model, "scripted", cfg.exploration_noise, rng, held)
    length = min(cfg.seq_len, len(held.episodes[0]))
    batch = held.sample(cfg.batch_size, length, rng)
    with torch.no_grad():
        out = elbo_terms(model, batch, draw_noise(model, rng, cfg.batch_size, length))
    return float(out.loss)


def fit(env_cfg: EnvConfig, rssm_cfg: RssmConfig, cfg: TrainConfig,
        ens_cfg: EnsembleConfig | None = None, progress=None) -> FitResult:
    """Warm-up with random episodes, then alternate training and collection.

    Environment steps count simulator frames (agent steps times action
    repeat). The latent ensemble and the PE train on the same cadence as
    the RSSM, on detached data.
    """
    ens_cfg = ens_cfg or EnsembleConfig()
    dtype = resolve_dtype(cfg.precision)
    seq = np.random.SeedSequence(cfg.seed)
    rng_collect, rng_train, rng_ens = (np.random.default_rng(s) for s in seq.spawn(3))
    env = make_env(env_cfg)
    model = build_model(env, rssm_cfg, dtype, cfg.seed)
    latent, pe = build_ensembles(env, model, ens_cfg, dtype, cfg.seed)
    opt = make_model_optimizer(model, cfg)
    opt_latent = make_optimizer(latent, ens_cfg)
    opt_pe = make_optimizer(pe, ens_cfg)
    buffer = ReplayBuffer()
    frames_per_episode = (env_cfg.episode_length - 1) * env_cfg.action_repeat
    env_steps = 0
    for _ in range(cfg.init_episodes):
        collect_episode(env, model, "random", 0.0, rng_collect, buffer)
        env_steps += frames_per_episode
    result = FitResult(model, latent, pe, buffer, env_steps=env_steps)
    if cfg.env_steps == 0:
        return result

    step = 0
    pe_data = None
    while env_steps < cfg.env_steps:
        pe_data = _pe_arrays(env, buffer, dtype)
        for _ in range(cfg.collect_interval):
            res = train_step(buffer, model, opt, cfg, rng_train, step)
            x, y = latent_tuples(res.output.h, res.output.z, res.output.actions)
            if ens_cfg.tuples_per_step < x.shape[0]:
                pick = torch.as_tensor(np.sort(rng_ens.choice(x.shape[0], ens_cfg.tuples_per_step, replace=False)))
                x, y = x[pick], y[pick]
            res.metrics["ens_nll"] = ensemble_train_step(latent, opt_latent, x, y, rng_ens,
                                                         ens_cfg.bootstrap, ens_cfg.grad_clip)
            pick = rng_ens.integers(0, pe_data[0].shape[0], size=ens_cfg.pe_batch)
            res.metrics["pe_nll"] = ensemble_train_step(pe, opt_pe, pe_data[0][pick], pe_data[1][pick],
                                                        rng_ens, ens_cfg.bootstrap, ens_cfg.grad_clip)
            result.log.append(res.metrics)
            step += 1
        if progress is not None:
            progress(step, env_steps, res.metrics)
        logger.info("step %d env_steps %d elbo %.4f", step, env_steps, res.metrics["elbo"])
        collect_episode(env, model, cfg.collect_policy, cfg.exploration_noise, rng_collect, buffer)
        env_steps += frames_per_episode
    result.env_steps = env_steps
    result.validation_elbo = validation_elbo(model, env, cfg, cfg.seed)
    return result


def _pe_arrays(env: Environment, buffer: ReplayBuffer, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    s, a, s2 = buffer.transitions()
    enc = env.encode_physical(s)
    x = np.concatenate([enc / env.state_scale_encoded, a], axis=1)
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(env.encode_physical(s2), dtype=dtype)


def format_log(rows: list[dict[str, float]]) -> str:
    """CSV text of the training log with a fixed header and decimal format."""
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(int(r["step"]))] + [f"{r[c]:.8f}" for c in LOG_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"
