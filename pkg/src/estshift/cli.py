"""Command-line entry point: one subcommand per experiment plus a gradient check.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from .experiments import ExperimentConfig, config_for, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

SUBCOMMANDS = {
    "setup-one": "setup_one",
    "setup-two": "setup_two",
    "gnbn": "gnbn",
    "perturb": "perturb",
    "xbn-toy": "xbn_toy",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="estshift",
                                description="Estimation-shift experiments on MNIST.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"run the {kind} experiment")
        sp.add_argument("--config", help="JSON config file (keys of ExperimentConfig)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="run a single seed (overrides the config)")
        sp.add_argument("--data-dir", help="directory holding the MNIST IDX files")
    gc = sub.add_parser("grad-check", help="finite-difference check of every layer type")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--tol", type=float, default=1e-5)
    return p


def load_config(kind: str, args) -> ExperimentConfig:
    overrides = {}
    if args.config:
        try:
            with open(args.config) as f:
                overrides = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(overrides, dict):
            raise ConfigError("config must be a JSON object")
        if overrides.get("kind", kind) != kind:
            raise ConfigError(f"config kind {overrides['kind']!r} does not match subcommand")
        overrides.pop("kind", None)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.data_dir is not None:
        overrides["data_dir"] = args.data_dir
    return config_for(kind, **overrides)


def run_grad_check(seed: int, instances: int, tol: float) -> int:
    from .gradcheck import check_all
    worst = check_all(seed, instances)
    ok = True
    for name, err in worst.items():
        passed = err < tol
        ok &= passed
        print(f"{name:12s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DIVERGED


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            return run_grad_check(args.seed, args.instances, args.tol)
        config = load_config(SUBCOMMANDS[args.command], args)
        result = run_experiment(config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    for run in result.runs:
        metrics = {k: v for k, v in run.metrics.items() if isinstance(v, (int, float, np.floating))}
        line = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in sorted(metrics.items()))
        print(f"{run.name}: {run.status} {line} {run.error}".rstrip())
    print(f"wrote {result.out_dir}")
    failed = result.failed
    if not failed:
        return EXIT_OK
    codes = {"config": EXIT_CONFIG, "data": EXIT_DATA}
    return codes.get(failed[0].family, EXIT_DIVERGED)


if __name__ == "__main__":
    sys.exit(main())
