import math

import numpy as np
import pytest
import torch

from latentdiag.core import DiagonalGaussian, kl_categorical, kl_diag_gaussian, positive
from latentdiag.rssm import RSSM, BeliefState, RssmConfig, gaussian_nll, unit_gaussian_nll_constant


def _belief(model, rng, batch=4):
    return BeliefState(
        torch.as_tensor(rng.normal(size=(batch, model.cfg.deter))),
        torch.as_tensor(rng.normal(size=(batch, model.cfg.stoch_dim))),
        torch.zeros(batch, model.cfg.stoch_dim, dtype=torch.float64),
    )


def test_default_sizes():
    cfg = RssmConfig()
    assert (cfg.deter, cfg.stoch, cfg.hidden) == (200, 30, 300)
    cat = RssmConfig(variant="categorical")
    assert (cat.groups, cat.classes, cat.stoch_dim) == (32, 32, 1024)
    with pytest.raises(ValueError):
        RssmConfig(variant="vq")


def test_init_belief_deterministic(tiny):
    _, model, _, _ = tiny
    a, b = model.init_belief((2,)), model.init_belief((2,))
    assert torch.equal(a.h, b.h) and torch.equal(a.z, b.z)
    assert a.h.shape == (2, model.cfg.deter)


def test_categorical_init_is_one_hot():
    model = RSSM(RssmConfig(variant="categorical"), obs_dim=16, action_dim=1, phys_dim=3)
    z = model.init_belief((1,)).z.reshape(32, 32)
    assert torch.equal(z.sum(-1), torch.ones(32, dtype=z.dtype))
    assert set(z.unique().tolist()) <= {0.0, 1.0}
    assert model.init_belief(()).h.shape == (200,)


def test_transition_prior_pure(tiny):
    _, model, _, _ = tiny
    b = _belief(model, np.random.default_rng(0))
    a = torch.ones(4, 1, dtype=torch.float64) * 0.3
    h1, p1 = model.transition_prior(b, a)
    h2, p2 = model.transition_prior(b, a)
    assert torch.equal(h1, h2)
    assert h1.shape == (4, model.cfg.deter)
    if isinstance(p1, DiagonalGaussian):
        assert torch.equal(p1.mean, p2.mean) and torch.equal(p1.std, p2.std)
    else:
        assert torch.equal(p1.logits, p2.logits)


def test_zero_weights_prior_and_posterior():
    model = RSSM(RssmConfig(stoch=3, deter=5, hidden=6), obs_dim=4, action_dim=1, phys_dim=3).zero_()
    b = _belief(model, np.random.default_rng(0), 2)
    h, prior = model.transition_prior(b, torch.zeros(2, 1, dtype=torch.float64))
    assert torch.equal(prior.mean, torch.zeros_like(prior.mean))
    assert torch.allclose(prior.std, positive(torch.zeros(1, dtype=torch.float64)).expand_as(prior.std))
    assert float(prior.std[0, 0].detach()) == pytest.approx(math.log(2) + 1e-5, abs=1e-15)
    post = model.posterior(h, torch.ones(2, 4, dtype=torch.float64))
    assert torch.equal(kl_diag_gaussian(post, prior), torch.zeros(2, dtype=torch.float64))


def test_zero_weights_categorical_kl():
    model = RSSM(RssmConfig(variant="categorical", groups=2, classes=3, deter=5, hidden=6),
                 obs_dim=4, action_dim=1, phys_dim=3).zero_()
    b = model.init_belief((2,))
    h, prior = model.transition_prior(b, torch.zeros(2, 1, dtype=torch.float64))
    post = model.posterior(h, torch.ones(2, 4, dtype=torch.float64))
    assert torch.equal(kl_categorical(post, prior), torch.zeros(2, dtype=torch.float64))


def test_posterior_event_shape_matches_prior(tiny):
    _, model, _, _ = tiny
    b = _belief(model, np.random.default_rng(1))
    h, prior = model.transition_prior(b, torch.zeros(4, 1, dtype=torch.float64))
    post = model.posterior(h, torch.zeros(4, model.obs_dim, dtype=torch.float64))
    get = (lambda d: d.mean.shape) if isinstance(prior, DiagonalGaussian) else (lambda d: d.logits.shape)
    assert get(prior) == get(post)
    with pytest.raises(ValueError):
        model.posterior(h, torch.zeros(4, model.obs_dim + 1, dtype=torch.float64))


def test_decoder_shapes_and_normalizer(tiny):
    env, model, _, _ = tiny
    b = _belief(model, np.random.default_rng(2))
    o = model.decode_observation(b)
    assert o.mean.shape == (4, model.obs_dim)
    assert model.decode_reward(b).mean.shape == (4, 1)
    assert model.decode_physical(b).mean.shape == (4, env.decoded_dim)
    nll = gaussian_nll(o, o.mean)
    assert torch.allclose(nll, torch.full((4,), unit_gaussian_nll_constant(model.obs_dim), dtype=torch.float64))


def test_heads_share_no_parameters(tiny):
    _, model, _, _ = tiny
    prior_ids = {id(p) for p in model.prior_head.parameters()}
    post_ids = {id(p) for p in model.posterior_head.parameters()}
    assert not prior_ids & post_ids


def test_fuzzed_inputs_finite(variant):
    from conftest import TINY_RSSM

    model = RSSM(TINY_RSSM[variant], obs_dim=16, action_dim=1, phys_dim=3, seed=1)
    rng = np.random.default_rng(0)
    n = 10_000
    with torch.no_grad():
        b = BeliefState(torch.as_tensor(rng.uniform(-10, 10, (n, model.cfg.deter))),
                        torch.as_tensor(rng.uniform(-10, 10, (n, model.cfg.stoch_dim))), None)
        h, _ = model.transition_prior(b, torch.as_tensor(rng.uniform(-10, 10, (n, 1))))
        post = model.posterior(h, torch.as_tensor(rng.uniform(-10, 10, (n, 16))))
        z, feat = model.sample(post, model.noise(rng, (n,)))
        nb = BeliefState(h, z, feat)
        for dec in (model.decode_observation, model.decode_reward, model.decode_physical):
            assert torch.isfinite(dec(nb).mean).all()


def test_same_seed_same_weights():
    cfg = RssmConfig(stoch=3, deter=5, hidden=6)
    a = RSSM(cfg, 4, 1, 3, seed=3)
    b = RSSM(cfg, 4, 1, 3, seed=3)
    c = RSSM(cfg, 4, 1, 3, seed=4)
    for (_, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
