import hashlib
import math
from pathlib import Path

import pytest

from latentdiag.cli import main

TINY_INI = """\
[run]
seed = 1
[env]
episode_length = 40
[model]
stoch = 3
deter = 6
hidden = 8
decoder_layers = 1
[train]
env_steps = 300
batch_size = 3
seq_len = 6
collect_interval = 4
init_episodes = 2
[ensemble]
members = 2
hidden = 8
layers = 1
pe_hidden = 8
pe_layers = 1
tuples_per_step = 32
pe_batch = 32
[rollout]
horizon = 8
count = 4
[diagnostics]
k = 10
bins_x = 5
bins_y = 4
reference_count = 3
"""


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree(d: Path) -> dict[str, str]:
    return {p.name: _sha(p) for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_INI)
    out = root / "run"
    trees = []
    for _ in range(2):
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        trees.append(_tree(out))
    return cfg, out, trees


def test_train_writes_outputs_and_is_byte_identical(trained):
    _, a, (first, second) = trained
    assert {"checkpoint.ldc", "train_log.csv", "config.resolved.ini", "manifest.json"} <= set(first)
    assert first == second
    log = (a / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,elbo,recon_o,recon_r,recon_s,kl,grad_norm" and len(log) > 1
    snap = (a / "config.resolved.ini").read_text()
    assert "lr = 0.0006" in snap and "grad_clip = 100" in snap


@pytest.mark.parametrize("mode", ["discrepancy", "reward", "uncertainty", "attractor-map"])
def test_diagnose_deterministic_across_workers(trained, tmp_path, mode):
    _, a, _ = trained
    ck = str(a / "checkpoint.ldc")
    trees = []
    for w in (1, 8, 1):
        out = tmp_path / f"w{w}_{len(trees)}"
        assert main(["diagnose", "--checkpoint", ck, "--mode", mode, "--start", "ood:hanging_fast",
                     "--workers", str(w), "--out", str(out)]) == 0
        trees.append(_tree(out))
    assert trees[0] == trees[1] == trees[2]
    assert "manifest.json" in trees[0]
    if mode == "attractor-map":
        assert any(n.endswith("field.svg") for n in trees[0])


def test_diagnose_count_one(trained, tmp_path):
    _, a, _ = trained
    assert main(["diagnose", "--checkpoint", str(a / "checkpoint.ldc"), "--mode", "discrepancy",
                 "--count", "1", "--out", str(tmp_path)]) == 0
    prior = next(tmp_path.glob("*_prior_trajectories.csv")).read_text().splitlines()
    assert len(prior) == 1 + 8
    assert {r.split(",")[0] for r in prior[1:]} == {"0"}
    traces = next(tmp_path.glob("*_traces.csv")).read_text().splitlines()
    assert all(r.endswith(",1") for r in traces[1:])


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_value_exits_2(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nbatch = 3\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["diagnose"]) == 2


def test_unknown_ood_lists_catalog(trained, tmp_path, capsys):
    _, a, _ = trained
    code = main(["diagnose", "--checkpoint", str(a / "checkpoint.ldc"), "--mode", "discrepancy",
                 "--start", "ood:upside_down", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "upside_down" in err and "hanging_fast" in err


def test_bad_checkpoint_exits_3(tmp_path):
    bad = tmp_path / "x.ldc"
    bad.write_bytes(b"garbage")
    assert main(["diagnose", "--checkpoint", str(bad), "--mode", "reward"]) == 3
    assert main(["diagnose", "--checkpoint", str(tmp_path / "missing.ldc"), "--mode", "reward"]) == 3


def test_nan_training_exits_4(tmp_path, capsys):
    cfg = tmp_path / "nan.ini"
    cfg.write_text(TINY_INI.replace("[train]\n", f"[train]\nlr = {math.inf}\n"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert "step" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "elbo-gaussian" in out and "pe-nll" in out and "FAIL" not in out
    assert main(["gradcheck", "--losses", "kl-diag-gaussian"]) == 0
