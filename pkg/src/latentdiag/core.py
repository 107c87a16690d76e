"""Distribution algebra, divergences, sampling and the gradient contract.

Everything here is built on torch tensors so the same code serves training
(autograd) and evaluation. Random draws always come from an explicit
``numpy.random.Generator`` so results do not depend on torch's global RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float64
STD_FLOOR = 1e-5
SIMPLEX_TOL = 1e-9


def resolve_dtype(precision: str) -> torch.dtype:
    if precision in ("float64", "64"):
        return torch.float64
    if precision in ("float32", "32"):
        return torch.float32
    raise ValueError(f"unknown precision {precision!r}; expected float64 or float32")


def positive(raw: torch.Tensor) -> torch.Tensor:
    """Map an unconstrained head output to a standard deviation."""
    return F.softplus(raw) + STD_FLOOR


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


@dataclass(frozen=True)
class DiagonalGaussian:
    """Gaussian with diagonal covariance; the last axis is the event axis."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def create(cls, mean, std, dtype: torch.dtype | None = None) -> "DiagonalGaussian":
        mean = as_tensor(mean, dtype)
        std = as_tensor(std, dtype if dtype is not None else mean.dtype)
        dist = cls(mean, std)
        dist.validate()
        if not bool(torch.isfinite(mean).all() and torch.isfinite(std).all()):
            raise ValueError("mean and std must be finite")
        return dist

    def validate(self) -> None:
        if self.mean.shape != self.std.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}"
            )
        if not bool(torch.all(self.std > 0)):
            raise ValueError("std must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        z = (x - self.mean) / self.std
        return (-0.5 * z**2 - torch.log(self.std) - 0.5 * math.log(2 * math.pi)).sum(-1)

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.std.detach())


@dataclass(frozen=True)
class CategoricalLatent:
    """Product of ``K`` independent categoricals over ``C`` classes.

    ``logits`` has shape ``(..., K, C)``.
    """

    logits: torch.Tensor

    @classmethod
    def create(cls, logits, dtype: torch.dtype | None = None) -> "CategoricalLatent":
        logits = as_tensor(logits, dtype)
        if logits.dim() < 2 or logits.shape[-1] < 1 or logits.shape[-2] < 1:
            raise ValueError("logits must have shape (..., K, C) with K, C >= 1")
        return cls(logits)

    @property
    def groups(self) -> int:
        return self.logits.shape[-2]

    @property
    def classes(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    def mode(self) -> torch.Tensor:
        idx = self.logits.argmax(dim=-1)
        return F.one_hot(idx, self.classes).to(self.logits.dtype)

    def detach(self) -> "CategoricalLatent":
        return CategoricalLatent(self.logits.detach())


def _check_gaussian_pair(p: DiagonalGaussian, q: DiagonalGaussian) -> None:
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {p.mean.shape[-1]} vs {q.mean.shape[-1]}")
    p.validate()
    q.validate()


def kl_diag_gaussian(p: DiagonalGaussian, q: DiagonalGaussian) -> torch.Tensor:
    """Closed-form KL(p || q), summed over the event axis."""
    _check_gaussian_pair(p, q)
    var_ratio = (p.std / q.std) ** 2
    mahal = ((p.mean - q.mean) / q.std) ** 2
    return 0.5 * (var_ratio + mahal - 1.0 - torch.log(var_ratio)).sum(-1)


def kl_categorical(p: CategoricalLatent, q: CategoricalLatent) -> torch.Tensor:
    """Sum over groups of the discrete KL(p || q)."""
    if p.logits.shape[-2:] != q.logits.shape[-2:]:
        raise ValueError(
            f"shape mismatch: {tuple(p.logits.shape[-2:])} vs {tuple(q.logits.shape[-2:])}"
        )
    probs = p.probs
    # 0 * log 0 contributes nothing; xlogy handles the deterministic case.
    terms = torch.xlogy(probs, probs) - probs * q.log_probs
    return terms.sum((-2, -1))


def geometric_mean_gaussian(
    members: Sequence[DiagonalGaussian], weights: Sequence[float] | None = None
) -> DiagonalGaussian:
    """Normalized weighted geometric mean of diagonal Gaussians.

    Precisions combine linearly; the mean is the precision-weighted average.
    """
    if len(members) == 0:
        raise ValueError("geometric mean of an empty member list")
    dims = {m.mean.shape[-1] for m in members}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch among members: {sorted(dims)}")
    if weights is None:
        w = torch.full((len(members),), 1.0 / len(members), dtype=members[0].mean.dtype)
    else:
        w = as_tensor(weights, members[0].mean.dtype)
        if w.shape != (len(members),):
            raise ValueError("one weight per member required")
        if bool(torch.any(w < 0)) or abs(float(w.sum()) - 1.0) > SIMPLEX_TOL:
            raise ValueError("weights must lie on the probability simplex")
    means = torch.stack([m.mean for m in members])
    prec = torch.stack([m.std**-2 for m in members])
    wshape = (-1,) + (1,) * (means.dim() - 1)
    w = w.reshape(wshape)
    prec_g = (w * prec).sum(0)
    mean_g = (w * prec * means).sum(0) / prec_g
    std_g = prec_g**-0.5
    # where all members agree, return them exactly (no rounding from the weighted sums)
    stds = torch.stack([m.std for m in members])
    same = (means == means[0]).all(0) & (stds == stds[0]).all(0)
    return DiagonalGaussian(torch.where(same, means[0], mean_g), torch.where(same, stds[0], std_g))


def gjs_uncertainty(members: Sequence[DiagonalGaussian]) -> torch.Tensor:
    """Mean KL from each member to their uniform-weight geometric mean."""
    if len(members) < 2:
        raise ValueError("disagreement needs at least two members")
    g = geometric_mean_gaussian(members)
    return torch.stack([kl_diag_gaussian(m, g) for m in members]).mean(0)


def variance_of_means(members: Sequence[DiagonalGaussian]) -> torch.Tensor:
    """Experimental secondary disagreement measure: mean per-dim variance of member means."""
    if len(members) < 2:
        raise ValueError("disagreement needs at least two members")
    means = torch.stack([m.mean for m in members])
    return means.var(0, unbiased=False).mean(-1)


def sample_gaussian(dist: DiagonalGaussian, rng: np.random.Generator) -> torch.Tensor:
    """Reparameterized draw ``mean + std * eps``."""
    eps = torch.as_tensor(rng.standard_normal(tuple(dist.mean.shape)), dtype=dist.mean.dtype)
    return dist.mean + dist.std * eps


def straight_through(lat: CategoricalLatent, index: torch.Tensor) -> torch.Tensor:
    """One-hot forward value with gradients routed through the probabilities."""
    probs = lat.probs
    onehot = F.one_hot(index, lat.classes).to(probs.dtype)
    # bracketed so the forward value is exactly one-hot
    return onehot + (probs - probs.detach())


def categorical_indices(lat: CategoricalLatent, uniforms: np.ndarray) -> torch.Tensor:
    """Inverse-CDF class indices for the given uniforms of shape ``(..., K)``."""
    cdf = torch.cumsum(lat.probs.detach(), dim=-1)
    u = torch.as_tensor(uniforms, dtype=cdf.dtype).unsqueeze(-1)
    idx = (cdf < u).sum(-1)
    return idx.clamp_(max=lat.classes - 1)


def sample_categorical_st(lat: CategoricalLatent, rng: np.random.Generator) -> torch.Tensor:
    """Exact one-hot samples per group, straight-through gradient."""
    u = rng.random(tuple(lat.logits.shape[:-1]))
    return straight_through(lat, categorical_indices(lat, u))


# --------------------------------------------------------------------------
# Gradient contract
# --------------------------------------------------------------------------

Params = Mapping[str, np.ndarray]


@dataclass
class GradientTape:
    """Records a scalar function of named parameter arrays.

    ``fn`` receives a dict of tensors keyed like ``params`` and must return a
    0-d tensor. The tape is re-evaluated on each :func:`grad` call.
    """

    fn: Callable[[dict[str, torch.Tensor]], torch.Tensor]
    dtype: torch.dtype = DEFAULT_DTYPE

    def evaluate(self, params: Params) -> float:
        with torch.no_grad():
            out = self.fn({k: torch.as_tensor(v, dtype=self.dtype) for k, v in params.items()})
        return float(out)


def grad(tape: GradientTape, params: Params) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of the recorded scalar."""
    leaves = {
        k: torch.tensor(np.asarray(v), dtype=tape.dtype, requires_grad=True)
        for k, v in params.items()
    }
    out = tape.fn(leaves)
    if out.dim() != 0:
        raise ValueError(f"gradient needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    return {
        k: (np.zeros_like(np.asarray(params[k], dtype=float)) if g is None else g.detach().numpy())
        for k, g in zip(leaves, grads)
    }


def finite_difference_grad(
    f: Callable[[dict[str, np.ndarray]], float], params: Params, h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time."""
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(base)
            flat[i] = orig - h
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Max-norm relative error between two gradient dicts."""
    va = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    vb = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    scale = max(np.max(np.abs(va)), np.max(np.abs(vb)), 1e-12)
    return float(np.max(np.abs(va - vb)) / scale)
