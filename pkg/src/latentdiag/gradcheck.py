"""Finite-difference checks for every differentiable loss in the package.

Each registered case builds a tiny float64 instance (at most 200
parameters) and compares autograd gradients against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from latentdiag.core import (
    DiagonalGaussian,
    GradientTape,
    finite_difference_grad,
    grad,
    kl_diag_gaussian,
    positive,
    relative_error,
)
from latentdiag.ensemble import EnsembleConfig, LatentEnsemble, PhysicalEnsemble
from latentdiag.rssm import RSSM, RssmConfig
from latentdiag.training import SequenceBatch, elbo_terms

TOLERANCE = 1e-4
MAX_PARAMS = 200


class _Call(nn.Module):
    def __init__(self, inner: nn.Module, fn: Callable[[nn.Module], torch.Tensor]):
        super().__init__()
        self.inner = inner
        self.fn = fn

    def forward(self):
        return self.fn(self.inner)


@dataclass
class Case:
    name: str
    module: nn.Module
    loss: Callable[[nn.Module], torch.Tensor]

    def tape(self) -> tuple[GradientTape, dict[str, np.ndarray]]:
        wrapper = _Call(self.module, self.loss)
        params = {k: v.detach().numpy().copy() for k, v in wrapper.named_parameters()}
        return GradientTape(lambda p: functional_call(wrapper, p, ())), params


@dataclass
class CheckResult:
    name: str
    n_params: int
    rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < TOLERANCE)


def _toy_batch(rng: np.random.Generator, obs: int, phys: int, B: int = 2, L: int = 3) -> SequenceBatch:
    return SequenceBatch(
        obs=rng.normal(size=(B, L, obs)),
        action=rng.uniform(-1, 1, size=(B, L, 1)),
        reward=rng.normal(size=(B, L)),
        phys=rng.normal(size=(B, L, phys)),
    )


def _perturb(module: nn.Module, rng: np.random.Generator, scale: float = 0.5) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.as_tensor(rng.normal(0.0, scale, size=tuple(p.shape))))
    return module


def elbo_gaussian_case(seed: int = 0) -> Case:
    rng = np.random.default_rng(seed)
    cfg = RssmConfig(variant="gaussian", stoch=2, deter=3, hidden=2, decoder_layers=1)
    model = _perturb(RSSM(cfg, obs_dim=2, action_dim=1, phys_dim=2, seed=seed), rng)
    batch = _toy_batch(rng, 2, 2)
    noise = model.noise(rng, (3, 2))
    return Case("elbo-gaussian", model, lambda m: elbo_terms(m, batch, noise).loss)


def elbo_categorical_case(seed: int = 0) -> Case:
    """Checked on the straight-through surrogate: sampled indices and the
    subtracted probabilities are frozen at the base parameters."""
    rng = np.random.default_rng(seed)
    cfg = RssmConfig(variant="categorical", groups=2, classes=2, deter=3, hidden=2, decoder_layers=1)
    model = _perturb(RSSM(cfg, obs_dim=2, action_dim=1, phys_dim=2, seed=seed), rng)
    batch = _toy_batch(rng, 2, 2)
    noise = model.noise(rng, (3, 2))
    with torch.no_grad():
        anchors = elbo_terms(model, batch, noise).anchors
    return Case("elbo-categorical", model, lambda m: elbo_terms(m, batch, noise, anchors).loss)


def latent_ensemble_case(seed: int = 0) -> Case:
    rng = np.random.default_rng(seed)
    cfg = EnsembleConfig(members=2, hidden=3, layers=2)
    ens = LatentEnsemble(deter=3, stoch_dim=2, action_dim=1, cfg=cfg, seed=seed)
    _perturb(ens, rng)
    x = torch.as_tensor(rng.normal(size=(5, 6)))
    y = torch.as_tensor(rng.normal(size=(5, 3)))
    return Case("latent-ensemble-nll", ens, lambda e: e.nll([x, x], [y, y]))


def pe_case(seed: int = 0) -> Case:
    rng = np.random.default_rng(seed)
    cfg = EnsembleConfig(members=2, pe_hidden=4, pe_layers=2)
    pe = PhysicalEnsemble(state_dim=3, action_dim=1, scale=np.array([1.0, 1.0, 8.0]), cfg=cfg, seed=seed)
    _perturb(pe, rng)
    s = rng.normal(size=(5, 3))
    a = rng.uniform(-1, 1, size=(5, 1))
    x = torch.as_tensor(np.concatenate([s / pe.scale.numpy(), a], axis=1))
    y = torch.as_tensor(s + 0.1 * rng.normal(size=(5, 3)))
    return Case("pe-nll", pe, lambda e: e.nll([x, x], [y, y]))


class _GaussPair(nn.Module):
    def __init__(self, rng):
        super().__init__()
        self.mean_p = nn.Parameter(torch.as_tensor(rng.normal(size=4)))
        self.raw_p = nn.Parameter(torch.as_tensor(rng.normal(size=4)))
        self.mean_q = nn.Parameter(torch.as_tensor(rng.normal(size=4)))
        self.raw_q = nn.Parameter(torch.as_tensor(rng.normal(size=4)))


def kl_case(seed: int = 0) -> Case:
    mod = _GaussPair(np.random.default_rng(seed))
    return Case("kl-diag-gaussian", mod, lambda m: kl_diag_gaussian(
        DiagonalGaussian(m.mean_p, positive(m.raw_p)), DiagonalGaussian(m.mean_q, positive(m.raw_q))))


REGISTRY: dict[str, Callable[[], Case]] = {
    "elbo-gaussian": elbo_gaussian_case,
    "elbo-categorical": elbo_categorical_case,
    "latent-ensemble-nll": latent_ensemble_case,
    "pe-nll": pe_case,
    "kl-diag-gaussian": kl_case,
}


def check_case(case: Case, h: float = 1e-5) -> CheckResult:
    start = time.perf_counter()
    tape, params = case.tape()
    n = sum(v.size for v in params.values())
    if n > MAX_PARAMS:
        raise ValueError(f"{case.name}: {n} parameters exceeds the {MAX_PARAMS}-parameter budget")
    analytic = grad(tape, params)
    numeric = finite_difference_grad(tape.evaluate, params, h)
    return CheckResult(case.name, n, relative_error(analytic, numeric), time.perf_counter() - start)


def run_all(cases: dict[str, Callable[[], Case]] | None = None) -> list[CheckResult]:
    cases = REGISTRY if cases is None else cases
    return [check_case(build()) for build in cases.values()]


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'loss':<22} {'params':>6} {'rel_err':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.n_params:>6} {r.rel_error:>10.2e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
