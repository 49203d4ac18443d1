"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 check failure, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .envs import make_env
from .training import TrainingError, train_run

EXIT_OK, EXIT_INVALID, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3


def _cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    log_ = train_run(cfg, out)
    r = log_.returns()
    tail = f"{r[-10:].mean():.2f}" if len(r) else "n/a"
    print(f"{cfg.estimator} on {cfg.env}: {len(r)} episodes, mean return of last 10 = {tail}; wrote {out}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    manifest = harness.ExperimentManifest.load(args.manifest)
    res = harness.run_experiment(manifest, workers=args.workers)
    if res.failures < len(res.rows):
        harness.aggregate(manifest.output, band=manifest.band)
    print(f"{len(res.rows)} runs, {res.failures} failed; index at {manifest.output / 'index.csv'}")
    return EXIT_RUNTIME if res.failures else EXIT_OK


def _cmd_aggregate(args) -> int:
    path = harness.aggregate(args.run_dir, band=args.band, bucket=args.bucket)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    rows = harness.verify()
    print(harness.verify_text(rows))
    if args.csv:
        harness.verify_csv(rows, args.csv)
    return EXIT_OK if harness.verify_passed(rows) else EXIT_CHECK


def _cmd_gradcheck(args) -> int:
    rep = harness.gradcheck(args.scope)
    print(rep.text())
    return EXIT_OK if rep.passed else EXIT_CHECK


def _cmd_visitation(args) -> int:
    env = make_env(args.env)
    policy = harness.load_policy(args.checkpoint)
    rep = harness.visitation_report(env, policy, args.episodes, args.bins, seed=args.seed,
                                    policy_id=str(args.checkpoint))
    rep.to_csv(args.out)
    print(f"{rep.total_steps} steps; top-decile bins hold {100 * rep.top_share():.1f}% of visits; wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvpg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one config")
    s.add_argument("config")
    s.add_argument("--out", default="run")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("experiment", help="run every (config, seed) of a manifest, then aggregate")
    s.add_argument("manifest")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_experiment)

    s = sub.add_parser("aggregate", help="median and interquantile band across seeds")
    s.add_argument("run_dir")
    s.add_argument("--band", type=float, default=0.75)
    s.add_argument("--bucket", type=int, help="fixed step-bucket width (default: union of step grids)")
    s.set_defaults(func=_cmd_aggregate)

    s = sub.add_parser("verify", help="loop and value-gradient existence report")
    s.add_argument("--csv", help="also write machine-readable rows here")
    s.set_defaults(func=_cmd_verify)

    s = sub.add_parser("gradcheck", help="gradient checks against finite differences and closed forms")
    s.add_argument("--scope", choices=harness.SCOPES, default="all")
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("visitation", help="state-visit histogram of a policy checkpoint")
    s.add_argument("env")
    s.add_argument("checkpoint")
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="visitation.csv")
    s.set_defaults(func=_cmd_visitation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
