"""Train and diagnose workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from latentdiag import checkpoint
from latentdiag.config import ConfigError, RunConfig, parse_config
from latentdiag.core import resolve_dtype
from latentdiag.diagnostics import (
    ReferenceSet,
    aggregate_traces,
    attractor_distance,
    build_vector_field,
    fit_embedding,
    physical_discrepancy,
    reward_discrepancy,
    select_id_state,
)
from latentdiag.ensemble import LatentEnsemble, PhysicalEnsemble, pe_rollout
from latentdiag.envs import Environment, make_env
from latentdiag.report import (
    traces_csv,
    trajectories_csv,
    vector_field_csv,
    vector_field_svg,
    write_manifest,
    write_text,
)
from latentdiag.rollouts import LatentTrajectory, RolloutSpec, batch_rollouts
from latentdiag.rssm import RSSM
from latentdiag.training import build_ensembles, build_model, fit, format_log

logger = logging.getLogger(__name__)

MODES = ("discrepancy", "reward", "attractor-map", "uncertainty")
CHECKPOINT_NAME = "checkpoint.ldc"


@dataclass
class Bundle:
    """Everything a diagnosis needs from a training run."""

    config: RunConfig
    model: RSSM
    ensemble: LatentEnsemble
    pe: PhysicalEnsemble
    id_state: np.ndarray
    buffer_states: np.ndarray
    validation_elbo: float
    env_steps: int
    log: list | None = None

    @property
    def env(self) -> Environment:
        return make_env(self.config.env)


def train(cfg: RunConfig, progress=None) -> Bundle:
    result = fit(cfg.env, cfg.model, cfg.train, cfg.ensemble, progress=progress)
    env = make_env(cfg.env)
    states = result.buffer.states()
    k = cfg.diagnostics.k
    id_state = select_id_state(states, env, k) if len(states) > k else states[0]
    return Bundle(cfg, result.model, result.ensemble, result.pe, id_state, states,
                  result.validation_elbo, result.env_steps, result.log)


def save_bundle(bundle: Bundle, path) -> None:
    arrays = {}
    arrays.update(checkpoint.module_arrays("rssm", bundle.model))
    arrays.update(checkpoint.module_arrays("latent_ensemble", bundle.ensemble))
    arrays.update(checkpoint.module_arrays("pe", bundle.pe))
    arrays["id_state"] = np.asarray(bundle.id_state, dtype=np.float64)
    arrays["buffer_states"] = np.asarray(bundle.buffer_states, dtype=np.float64)
    meta = {
        "config": bundle.config.to_text(),
        "validation_elbo": repr(float(bundle.validation_elbo)),
        "env_steps": int(bundle.env_steps),
    }
    checkpoint.save(path, arrays, meta)


def load_bundle(path) -> Bundle:
    arrays, meta = checkpoint.load(path)
    cfg = parse_config(meta["config"], source=f"{path}:config", environ={})
    env = make_env(cfg.env)
    dtype = resolve_dtype(cfg.train.precision)
    model = build_model(env, cfg.model, dtype, cfg.train.seed)
    ens, pe = build_ensembles(env, model, cfg.ensemble, dtype, cfg.train.seed)
    checkpoint.load_module("rssm", model, arrays)
    checkpoint.load_module("latent_ensemble", ens, arrays)
    checkpoint.load_module("pe", pe, arrays)
    return Bundle(cfg, model, ens, pe, arrays["id_state"], arrays["buffer_states"],
                  float(meta["validation_elbo"]), int(meta["env_steps"]))


def write_training_outputs(bundle: Bundle, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    save_bundle(bundle, ckpt)
    log = write_text(out / "train_log.csv", format_log(bundle.log or []))
    snap = write_text(out / "config.resolved.ini", bundle.config.to_text())
    write_manifest(out, [(log, "training_log")])
    return {"checkpoint": ckpt, "log": log, "config": snap}


# --------------------------------------------------------------------------
# Diagnosis
# --------------------------------------------------------------------------

def start_tag(start: str) -> str:
    return start.replace(":", "-")


def check_start(env: Environment, start: str) -> None:
    if start in ("random", "id"):
        return
    if not start.startswith("ood:"):
        raise ConfigError(f"start must be id, random or ood:<name>, got {start!r}")
    name = start.split(":", 1)[1]
    if name not in env.ood_catalog:
        listing = "; ".join(f"{k}: {v[1]}" for k, v in sorted(env.ood_catalog.items()))
        raise ConfigError(f"unknown OOD state {name!r} for {env.name}. Catalog: {listing}")


def rollout_spec(cfg: RunConfig, kind: str, start: str, seed: int | None = None) -> RolloutSpec:
    r = cfg.rollout
    return RolloutSpec(kind=kind, horizon=r.horizon, warmup=r.warmup, policy=r.policy, noise=r.noise,
                       start=start, seed=cfg.run.seed if seed is None else seed)


def run_kind(bundle: Bundle, kind: str, start: str, count: int, workers: int,
             seed: int | None = None) -> list[LatentTrajectory]:
    spec = rollout_spec(bundle.config, kind, start, seed)
    return batch_rollouts(bundle.model, bundle.ensemble, bundle.config.env, spec, count, workers,
                          id_state=bundle.id_state)


def discrepancy_runs(bundle: Bundle, trajs: list[LatentTrajectory]) -> tuple[list, list]:
    env = bundle.env
    phys, rew = [], []
    for tr in trajs:
        states, rewards = env.replay(tr.start_state, tr.actions)
        phys.append(physical_discrepancy(tr, env, truth_states=states))
        rew.append(reward_discrepancy(tr, env, truth_rewards=rewards))
    return phys, rew


def pe_uncertainty_runs(bundle: Bundle, trajs: list[LatentTrajectory], mode: str = "mean") -> list[np.ndarray]:
    """PE rollouts along each trajectory's action sequence and start."""
    env = bundle.env
    out = []
    for tr in trajs:
        rng = np.random.default_rng(np.random.SeedSequence([bundle.config.run.seed, tr.rollout_id, 0x9E]))
        _, unc = pe_rollout(bundle.pe, env.encode_physical(tr.start_state), tr.actions, mode, rng)
        out.append(unc)
    return out


def reference_set(bundle: Bundle, emb, count: int, workers: int) -> ReferenceSet:
    """Posterior latents from training-distribution (random) starts."""
    refs = run_kind(bundle, "posterior", "random", count, workers, seed=bundle.config.run.seed + 7)
    return ReferenceSet.from_trajectories(refs, emb)


def diagnose(bundle: Bundle, mode: str, start: str, count: int, workers: int, out_dir,
             seed: int | None = None) -> dict[str, Path]:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    env = bundle.env
    check_start(env, start)
    if seed is not None:
        bundle = replace(bundle, config=replace(bundle.config, run=replace(bundle.config.run, seed=seed)))
    cfg = bundle.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.env.env_id}_{cfg.model.variant}_{mode}_{start_tag(start)}"
    written: dict[str, Path] = {}
    schemas = []

    def emit(name: str, text: str, schema: str) -> None:
        p = write_text(out / f"{stem}_{name}", text)
        written[name] = p
        schemas.append((p, schema))

    kinds = {
        "discrepancy": ("prior", "posterior", "posterior-informed"),
        "reward": ("prior", "posterior"),
        "uncertainty": ("prior",),
        "attractor-map": ("prior", "posterior"),
    }[mode]
    run_start = "random" if mode == "attractor-map" else start
    trajs = {k: run_kind(bundle, k, run_start, count, workers) for k in kinds}
    for k, tr in trajs.items():
        emit(f"{k}_trajectories.csv", trajectories_csv(tr, env), "trajectories")

    series = {}
    if mode in ("discrepancy", "reward", "uncertainty"):
        for k, tr in trajs.items():
            phys, rew = discrepancy_runs(bundle, tr)
            if mode in ("discrepancy", "uncertainty"):
                series[f"{k}_physical_discrepancy"] = aggregate_traces(phys)
            if mode == "reward":
                series[f"{k}_reward_discrepancy"] = aggregate_traces(rew)
        if mode == "uncertainty":
            latent = [np.nan_to_num(t.uncertainty, nan=0.0) for t in trajs["prior"]]
            series["prior_latent_uncertainty"] = aggregate_traces(latent)
            series["pe_uncertainty"] = aggregate_traces(pe_uncertainty_runs(bundle, trajs["prior"],
                                                                            cfg.diagnostics.pe_mode))
        emit("traces.csv", traces_csv(series), "traces")
    else:
        pool = cfg.diagnostics.pool
        pooled = [t for k, tr in trajs.items() if pool in ("both", k) for t in tr]
        if len(pooled) < 3:
            pooled = pooled * 3
        emb = fit_embedding(pooled)
        vf = build_vector_field(emb, pooled, (cfg.diagnostics.bins_x, cfg.diagnostics.bins_y),
                                cfg.diagnostics.margin)
        overlays = {}
        exemplar_starts = [start] if start != "random" else ["id"] + [f"ood:{n}" for n in sorted(env.ood_catalog)][:1]
        for s in exemplar_starts:
            for k in ("posterior", "prior"):
                ex = run_kind(bundle, k, s, 1, 1)[0]
                overlays[f"{start_tag(s)} {k}"] = emb.project(ex.features())
        emit("field.csv", vector_field_csv(vf), "vector_field")
        emit("field.svg", vector_field_svg(vf, overlays, title=stem), "svg")
        if start != "random":
            ref = reference_set(bundle, emb, cfg.diagnostics.reference_count, workers)
            prior = run_kind(bundle, "prior", start, count, workers)
            series["prior_attractor_distance"] = aggregate_traces([attractor_distance(t, ref, emb) for t in prior])
            emit("traces.csv", traces_csv(series), "traces")
    write_manifest(out, schemas)
    return written
