"""Ensembles of Gaussian one-step predictors.

Two flavours share one implementation: the latent ensemble predicts the
next deterministic RSSM state from ``(h, z, a)``, the physical ensemble
(PE) predicts the next encoded physical state from ``(s, a)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from latentdiag.core import DEFAULT_DTYPE, DiagonalGaussian, gjs_uncertainty, positive


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = 5
    hidden: int = 300
    layers: int = 5
    layer_norm: bool = True
    lr: float = 6e-4
    grad_clip: float = 100.0
    bootstrap: bool = True
    tuples_per_step: int = 512
    identical_init: bool = False
    pe_hidden: int = 200
    pe_layers: int = 4
    pe_batch: int = 256

    def __post_init__(self):
        if self.members < 2:
            raise ValueError("an ensemble needs at least two members")
        if min(self.hidden, self.layers, self.pe_hidden, self.pe_layers, self.pe_batch, self.tuples_per_step) < 1:
            raise ValueError("ensemble sizes must be positive")


def member_net(d_in: int, d_out: int, hidden: int, layers: int, layer_norm: bool) -> nn.Sequential:
    mods: list[nn.Module] = []
    d = d_in
    for _ in range(layers):
        mods.append(nn.Linear(d, hidden))
        if layer_norm:
            mods.append(nn.LayerNorm(hidden))
        mods.append(nn.ELU())
        d = hidden
    mods.append(nn.Linear(d, 2 * d_out))
    return nn.Sequential(*mods)


class GaussianEnsemble(nn.Module):
    """``M`` independently parameterized networks emitting diagonal Gaussians."""

    def __init__(self, d_in: int, d_out: int, members: int, hidden: int, layers: int,
                 layer_norm: bool = True, identical_init: bool = False, seed: int = 0,
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        nets = []
        with torch.random.fork_rng(devices=[]):
            for i in range(members):
                torch.manual_seed(seed * 1009 + (0 if identical_init else i))
                nets.append(member_net(d_in, d_out, hidden, layers, layer_norm))
        self.nets = nn.ModuleList(nets)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def __len__(self) -> int:
        return len(self.nets)

    def _head(self, out: torch.Tensor, x: torch.Tensor) -> DiagonalGaussian:
        mean, raw = out.chunk(2, dim=-1)
        return DiagonalGaussian(mean, positive(raw))

    def member_dists(self, x: torch.Tensor) -> list[DiagonalGaussian]:
        return [self._head(net(x), x) for net in self.nets]

    def nll(self, xs: list[torch.Tensor], ys: list[torch.Tensor]) -> torch.Tensor:
        """Sum over members of the mean Gaussian NLL on each member's view."""
        total = 0.0
        for net, x, y in zip(self.nets, xs, ys):
            total = total + (-self._head(net(x), x).log_prob(y)).mean()
        return total


class LatentEnsemble(GaussianEnsemble):
    """Predicts ``h_t`` from ``(h_{t-1}, z_{t-1}, a_{t-1})``."""

    def __init__(self, deter: int, stoch_dim: int, action_dim: int, cfg: EnsembleConfig,
                 seed: int = 0, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__(deter + stoch_dim + action_dim, deter, cfg.members, cfg.hidden,
                         cfg.layers, cfg.layer_norm, cfg.identical_init, seed, dtype)

    @staticmethod
    def inputs(h, z, a) -> torch.Tensor:
        return torch.cat([h, z, a], dim=-1)

    def predict(self, h, z, a) -> list[DiagonalGaussian]:
        return self.member_dists(self.inputs(h, z, a))


class PhysicalEnsemble(GaussianEnsemble):
    """Predicts the next encoded physical state as a residual on ``s_t``.

    Inputs are divided by ``scale`` so velocities and angles are comparable.
    """

    def __init__(self, state_dim: int, action_dim: int, scale, cfg: EnsembleConfig,
                 seed: int = 0, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__(state_dim + action_dim, state_dim, cfg.members, cfg.pe_hidden,
                         cfg.pe_layers, False, cfg.identical_init, seed + 7919, dtype)
        self.register_buffer("scale", torch.as_tensor(np.asarray(scale), dtype=dtype))

    def _head(self, out, x):
        mean, raw = out.chunk(2, dim=-1)
        s = x[..., : self.d_out] * self.scale
        return DiagonalGaussian(s + mean * self.scale, positive(raw) * self.scale)

    def inputs(self, s, a) -> torch.Tensor:
        return torch.cat([s / self.scale, a], dim=-1)

    def predict(self, s, a) -> list[DiagonalGaussian]:
        return self.member_dists(self.inputs(s, a))


def make_optimizer(ens: GaussianEnsemble, cfg: EnsembleConfig) -> torch.optim.Adam:
    return torch.optim.Adam(ens.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def _views(n: int, members: int, bootstrap: bool, rng: np.random.Generator) -> list[np.ndarray]:
    if not bootstrap:
        return [np.arange(n)] * members
    return [rng.integers(0, n, size=n) for _ in range(members)]


def ensemble_train_step(ens: GaussianEnsemble, opt: torch.optim.Optimizer, x: torch.Tensor,
                        y: torch.Tensor, rng: np.random.Generator, bootstrap: bool = True,
                        grad_clip: float = 100.0) -> float:
    """One Adam step on each member's (bootstrapped) view of ``(x, y)``.

    Inputs and targets are detached, so no gradient reaches whatever
    produced them.
    """
    if x.shape[0] == 0:
        raise ValueError("ensemble batch is empty")
    x = x.detach().to(ens.dtype)
    y = y.detach().to(ens.dtype)
    idx = _views(x.shape[0], len(ens), bootstrap, rng)
    xs = [x[torch.as_tensor(i)] for i in idx]
    ys = [y[torch.as_tensor(i)] for i in idx]
    loss = ens.nll(xs, ys)
    opt.zero_grad()
    loss.backward()
    nn.utils.clip_grad_norm_(ens.parameters(), grad_clip)
    opt.step()
    return float(loss.detach()) / len(ens)


def latent_tuples(h: torch.Tensor, z: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Ensemble training pairs from time-major posterior unrolls.

    ``h``, ``z``: (L, B, .) beliefs; ``a``: (L, B, A) where ``a[t]`` led into
    step ``t``. Pairs ``(h[t-1], z[t-1], a[t]) -> h[t]`` for ``t >= 1``.
    """
    x = torch.cat([h[:-1], z[:-1], a[1:]], dim=-1).reshape(-1, h.shape[-1] + z.shape[-1] + a.shape[-1])
    y = h[1:].reshape(-1, h.shape[-1])
    return x.detach(), y.detach()


def ensemble_predict(ens: LatentEnsemble, h, z, a) -> list[DiagonalGaussian]:
    with torch.no_grad():
        return ens.predict(h, z, a)


def pe_rollout(pe: PhysicalEnsemble, s0, actions, mode: str = "mean",
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Autoregressive PE rollout from the encoded start state ``s0``.

    ``mode="mean"`` propagates the average of member means;
    ``mode="member-sample"`` draws from one uniformly chosen member per step.
    Returns predicted encoded states ``(T, d)`` and per-step disagreement.
    """
    if mode not in ("mean", "member-sample"):
        raise ValueError(f"unknown propagation mode {mode!r}")
    actions = np.asarray(actions, dtype=float).reshape(len(actions), -1) if len(actions) else np.zeros((0, 1))
    T = len(actions)
    d = pe.d_out
    states = np.zeros((T, d))
    unc = np.zeros(T)
    if T == 0:
        return states, unc
    if mode == "member-sample" and rng is None:
        raise ValueError("member-sample propagation needs an rng")
    s = torch.as_tensor(np.asarray(s0, dtype=float), dtype=pe.dtype)
    with torch.no_grad():
        for t in range(T):
            a = torch.as_tensor(actions[t], dtype=pe.dtype)
            dists = pe.predict(s, a)
            unc[t] = float(gjs_uncertainty(dists))
            if mode == "mean":
                s = torch.stack([m.mean for m in dists]).mean(0)
            else:
                k = int(rng.integers(len(dists)))
                eps = torch.as_tensor(rng.standard_normal(d), dtype=pe.dtype)
                s = dists[k].mean + dists[k].std * eps
            states[t] = s.numpy()
    return states, unc
