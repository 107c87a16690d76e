import numpy as np
import pytest
import torch

from latentdiag.ensemble import EnsembleConfig
from latentdiag.envs import EnvConfig, make_env
from latentdiag.rssm import RssmConfig
from latentdiag.training import ReplayBuffer, build_ensembles, build_model, collect_episode

TINY_RSSM = {
    "gaussian": RssmConfig(variant="gaussian", stoch=4, deter=8, hidden=16, decoder_layers=1),
    "categorical": RssmConfig(variant="categorical", groups=3, classes=4, deter=8, hidden=16, decoder_layers=1),
}
TINY_ENS = EnsembleConfig(members=3, hidden=16, layers=2, pe_hidden=16, pe_layers=2, tuples_per_step=64, pe_batch=64)
SHORT_ENV = EnvConfig(episode_length=60)


@pytest.fixture(params=["gaussian", "categorical"])
def variant(request):
    return request.param


@pytest.fixture
def tiny(variant):
    env = make_env(SHORT_ENV)
    model = build_model(env, TINY_RSSM[variant], torch.float64, seed=0)
    ens, pe = build_ensembles(env, model, TINY_ENS, torch.float64, seed=0)
    return env, model, ens, pe


@pytest.fixture
def small_buffer():
    env = make_env(SHORT_ENV)
    rng = np.random.default_rng(0)
    buf = ReplayBuffer()
    for policy in ("random", "scripted", "random"):
        collect_episode(env, None, policy, 0.3, rng, buf)
    return buf


def pytest_terminal_summary(terminalreporter):
    import acceptance_support

    if acceptance_support.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_support.RESULTS):
            terminalreporter.write_line(acceptance_support.RESULTS[n])
