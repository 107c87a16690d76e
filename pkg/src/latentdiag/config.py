"""Run configuration: INI-style ``key = value`` sections with strict keys.

Sections map onto the dataclasses of each module::

    [run]          seed, out, workers
    [env]          EnvConfig fields
    [model]        RssmConfig fields
    [train]        TrainConfig fields (seed comes from [run])
    [ensemble]     EnsembleConfig fields
    [rollout]      horizon, warmup, policy, noise, count
    [diagnostics]  k, bins_x, bins_y, margin, reference_count, pool, pe_mode

Environment variables ``LATENTDIAG_<SECTION>_<KEY>`` override file values,
e.g. ``LATENTDIAG_TRAIN_ENV_STEPS=4000``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from latentdiag.ensemble import EnsembleConfig
from latentdiag.envs import EnvConfig
from latentdiag.rssm import RssmConfig
from latentdiag.training import TrainConfig

ENV_PREFIX = "LATENTDIAG_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 50
    warmup: int = 3
    policy: str = "scripted"
    noise: float = 0.3
    count: int = 1000


@dataclass(frozen=True)
class DiagnosticsConfig:
    k: int = 100
    bins_x: int = 40
    bins_y: int = 40
    margin: float = 0.05
    reference_count: int = 100
    pool: str = "both"
    pe_mode: str = "mean"

    def __post_init__(self):
        if self.pool not in ("both", "prior", "posterior"):
            raise ConfigError(f"diagnostics.pool must be both, prior or posterior, got {self.pool!r}")
        if self.pe_mode not in ("mean", "member-sample"):
            raise ConfigError(f"diagnostics.pe_mode must be mean or member-sample, got {self.pe_mode!r}")


SECTIONS = {
    "run": RunSection,
    "env": EnvConfig,
    "model": RssmConfig,
    "train": TrainConfig,
    "ensemble": EnsembleConfig,
    "rollout": RolloutConfig,
    "diagnostics": DiagnosticsConfig,
}
# keys owned by another section
HIDDEN = {"env": {"seed"}, "train": {"seed"}}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    model: RssmConfig = field(default_factory=RssmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=seed), env=replace(self.env, seed=seed),
                       train=replace(self.train, seed=seed))

    def with_out(self, out: str) -> "RunConfig":
        return replace(self, run=replace(self.run, out=str(out)))

    def with_workers(self, workers: int) -> "RunConfig":
        return replace(self, run=replace(self.run, workers=workers))

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            lines.append(f"[{section}]")
            for f in fields(obj):
                if f.name in HIDDEN.get(section, ()):
                    continue
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError(raw)
            return int(as_float)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def parse_config(text: str, source: str = "<string>", environ: dict | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        allowed = _defaults(SECTIONS[section])
        for key, raw in parser.items(section):
            if key not in allowed or key in HIDDEN.get(section, ()):
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[section][key] = _coerce(section, key, raw, allowed[key])
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
        if section not in SECTIONS:
            raise ConfigError(f"environment override {name}: unknown section {section!r}")
        allowed = _defaults(SECTIONS[section])
        if key not in allowed or key in HIDDEN.get(section, ()):
            raise ConfigError(f"environment override {name}: unknown key {key!r} in [{section}]")
        values[section][key] = _coerce(section, key, raw, allowed[key])
    try:
        built = {name: cls(**values[name]) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig(**built)
    return cfg.with_seed(cfg.run.seed)


def load_config(path, environ: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p), environ)


def as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
