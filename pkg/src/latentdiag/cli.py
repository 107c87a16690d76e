"""Command-line entry point: ``latentdiag {train,diagnose,gradcheck}``.

Exit codes: 0 ok, 1 gradient check failed, 2 config error, 3 IO error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from latentdiag import gradcheck, pipeline
from latentdiag.checkpoint import CheckpointError
from latentdiag.config import ConfigError, RunConfig, load_config
from latentdiag.training import NumericError

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("latentdiag")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentdiag", description="Train latent world models and diagnose their rollouts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write checkpoint, log and resolved config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--workers", type=int)

    d = sub.add_parser("diagnose", help="run rollouts from a checkpoint and emit CSV/SVG artifacts")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--mode", required=True, choices=pipeline.MODES)
    d.add_argument("--start", default="id", help="id, random or ood:<name>")
    d.add_argument("--count", type=int, help="rollouts per kind (default: rollout.count, 1000)")
    d.add_argument("--config", help="override the config stored in the checkpoint")
    d.add_argument("--seed", type=int)
    d.add_argument("--workers", type=int)
    d.add_argument("--out")

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable loss")
    g.add_argument("--losses", nargs="*", choices=sorted(gradcheck.REGISTRY),
                   help="subset of registered losses (default: all)")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out(args.out)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        cfg = cfg.with_workers(args.workers)
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)

    def progress(step, env_steps, metrics):
        log.info("step %d env_steps %d elbo %.4f", step, env_steps, metrics.get("elbo", float("nan")))

    bundle = pipeline.train(cfg, progress=progress)
    paths = pipeline.write_training_outputs(bundle, cfg.run.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    bundle = pipeline.load_bundle(args.checkpoint)
    if args.config is not None:
        override = load_config(args.config)
        bundle.config = override.with_seed(bundle.config.run.seed)
    cfg = bundle.config
    count = cfg.rollout.count if args.count is None else args.count
    if count < 1:
        raise ConfigError(f"--count must be >= 1, got {count}")
    workers = args.workers if args.workers is not None else cfg.run.workers
    if workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {workers}")
    out = args.out if args.out is not None else cfg.run.out
    written = pipeline.diagnose(bundle, args.mode, args.start, count, workers, out, seed=args.seed)
    for name, path in written.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.losses or list(gradcheck.REGISTRY)
    results = gradcheck.run_all({n: gradcheck.REGISTRY[n] for n in names})
    print(gradcheck.format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


COMMANDS = {"train": cmd_train, "diagnose": cmd_diagnose, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are config errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
