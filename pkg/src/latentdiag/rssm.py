"""Recurrent state space model in Gaussian and categorical variants."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from latentdiag.core import (
    DEFAULT_DTYPE,
    CategoricalLatent,
    DiagonalGaussian,
    categorical_indices,
    positive,
    straight_through,
)

ACTIVATIONS = {"silu": nn.SiLU, "elu": nn.ELU, "tanh": nn.Tanh}


@dataclass(frozen=True)
class RssmConfig:
    variant: str = "gaussian"
    stoch: int = 30
    groups: int = 32
    classes: int = 32
    deter: int = 200
    hidden: int = 300
    activation: str = "silu"
    decoder_layers: int = 3

    def __post_init__(self):
        if self.variant not in ("gaussian", "categorical"):
            raise ValueError(f"variant must be gaussian or categorical, got {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name in ("stoch", "groups", "classes", "deter", "hidden", "decoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def stoch_dim(self) -> int:
        """Flattened size of the stochastic state."""
        return self.stoch if self.variant == "gaussian" else self.groups * self.classes


@dataclass
class BeliefState:
    """Deterministic state ``h`` and stochastic sample ``z`` (flattened).

    ``z_feature`` is the distribution mean (Gaussian) or mode (categorical)
    used for embeddings.
    """

    h: torch.Tensor
    z: torch.Tensor
    z_feature: torch.Tensor

    def detach(self) -> "BeliefState":
        return BeliefState(self.h.detach(), self.z.detach(), self.z_feature.detach())


def mlp(d_in: int, d_out: int, hidden: int, layers: int, act: type[nn.Module]) -> nn.Sequential:
    mods: list[nn.Module] = []
    d = d_in
    for _ in range(layers):
        mods += [nn.Linear(d, hidden), act()]
        d = hidden
    mods.append(nn.Linear(d, d_out))
    return nn.Sequential(*mods)


class RSSM(nn.Module):
    """Transition, representation and decoder networks.

    Decoders see the full belief ``(h, z)``. The physical decoder predicts
    the encoded physical state without excluded components.
    """

    def __init__(self, cfg: RssmConfig, obs_dim: int, action_dim: int, phys_dim: int,
                 dtype: torch.dtype = DEFAULT_DTYPE, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.obs_dim, self.action_dim, self.phys_dim = obs_dim, action_dim, phys_dim
        act = ACTIVATIONS[cfg.activation]
        H, W, Z = cfg.deter, cfg.hidden, cfg.stoch_dim
        stat = 2 * cfg.stoch if cfg.variant == "gaussian" else cfg.groups * cfg.classes
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
            self.encoder = mlp(obs_dim, W, W, 2, act)
            self.embed = nn.Sequential(nn.Linear(Z + action_dim, W), act())
            self.cell = nn.GRUCell(W, H)
            self.prior_head = mlp(H, stat, W, 1, act)
            self.posterior_head = mlp(H + W, stat, W, 1, act)
            feat = H + Z
            self.obs_decoder = mlp(feat, obs_dim, W, cfg.decoder_layers, act)
            self.reward_decoder = mlp(feat, 1, W, cfg.decoder_layers, act)
            self.phys_decoder = mlp(feat, phys_dim, W, cfg.decoder_layers, nn.ELU)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.cell.weight_ih.dtype

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def zero_(self) -> "RSSM":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    # -- distributions ------------------------------------------------------

    def _dist(self, stats: torch.Tensor):
        if self.cfg.variant == "gaussian":
            mean, raw = stats.chunk(2, dim=-1)
            return DiagonalGaussian(mean, positive(raw))
        return CategoricalLatent(stats.unflatten(-1, (self.cfg.groups, self.cfg.classes)))

    def sample(self, dist, noise, anchor=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Draw a flattened stochastic sample and its feature (mean or mode).

        ``noise`` is standard normal (Gaussian) or uniform per group
        (categorical). For the categorical variant, ``anchor`` may fix the
        sampled indices and the probabilities subtracted in the straight-
        through estimator, which yields a smooth surrogate for gradient checks.
        """
        if isinstance(dist, DiagonalGaussian):
            eps = torch.as_tensor(noise, dtype=dist.mean.dtype)
            return dist.mean + dist.std * eps, dist.mean
        if anchor is None:
            z = straight_through(dist, categorical_indices(dist, noise))
        else:
            idx, probs0 = anchor
            z = nn.functional.one_hot(idx, dist.classes).to(dist.logits.dtype) + dist.probs - probs0
        return z.flatten(-2), dist.mode().flatten(-2)

    def noise(self, rng: np.random.Generator, batch: tuple[int, ...]) -> np.ndarray:
        if self.cfg.variant == "gaussian":
            return rng.standard_normal(batch + (self.cfg.stoch,))
        return rng.random(batch + (self.cfg.groups,))

    # -- model equations ----------------------------------------------------

    def init_belief(self, batch: tuple[int, ...] = (), rng: np.random.Generator | None = None) -> BeliefState:
        """Zero ``h``; ``z`` from the prior head at ``h == 0``.

        Without ``rng`` the prior mean (or mode) is used, so the result is
        deterministic.
        """
        h = torch.zeros(batch + (self.cfg.deter,), dtype=self.dtype)
        dist = self._dist(self.prior_head(h))
        if rng is None:
            if isinstance(dist, DiagonalGaussian):
                return BeliefState(h, dist.mean, dist.mean)
            mode = dist.mode().flatten(-2)
            return BeliefState(h, mode, mode)
        z, feat = self.sample(dist, self.noise(rng, batch))
        return BeliefState(h, z, feat)

    def transition_prior(self, belief: BeliefState, action: torch.Tensor):
        x = self.embed(torch.cat([belief.z, action], dim=-1))
        h = self.cell(x, belief.h)
        return h, self._dist(self.prior_head(h))

    def embed_obs(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != model obs dim {self.obs_dim}")
        return self.encoder(obs)

    def posterior(self, h: torch.Tensor, obs: torch.Tensor, embedded: torch.Tensor | None = None):
        e = self.embed_obs(obs) if embedded is None else embedded
        return self._dist(self.posterior_head(torch.cat([h, e], dim=-1)))

    @staticmethod
    def features(belief: BeliefState) -> torch.Tensor:
        return torch.cat([belief.h, belief.z], dim=-1)

    def decode_observation(self, belief: BeliefState) -> DiagonalGaussian:
        mean = self.obs_decoder(self.features(belief))
        return DiagonalGaussian(mean, torch.ones_like(mean))

    def decode_reward(self, belief: BeliefState) -> DiagonalGaussian:
        mean = self.reward_decoder(self.features(belief))
        return DiagonalGaussian(mean, torch.ones_like(mean))

    def decode_physical(self, belief: BeliefState) -> DiagonalGaussian:
        mean = self.phys_decoder(self.features(belief))
        return DiagonalGaussian(mean, torch.ones_like(mean))

    # -- convenience ----------------------------------------------------------

    def filter_step(self, belief: BeliefState, action, obs, noise) -> tuple[BeliefState, object, object]:
        """One posterior update: returns the new belief, prior and posterior."""
        h, prior = self.transition_prior(belief, action)
        post = self.posterior(h, obs)
        z, feat = self.sample(post, noise)
        return BeliefState(h, z, feat), prior, post

    def imagine_step(self, belief: BeliefState, action, noise) -> tuple[BeliefState, object]:
        h, prior = self.transition_prior(belief, action)
        z, feat = self.sample(prior, noise)
        return BeliefState(h, z, feat), prior


def gaussian_nll(dist: DiagonalGaussian, target: torch.Tensor) -> torch.Tensor:
    return -dist.log_prob(target)


def unit_gaussian_nll_constant(dim: int) -> float:
    """NLL of the mean itself under a unit-variance Gaussian."""
    return 0.5 * dim * math.log(2 * math.pi)
