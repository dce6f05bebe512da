"""Command-line entry point: `occuslam run <config.json> [options]`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .pipeline import ConfigError, RunConfig, run, run_ablation


def build_parser():
    parser = argparse.ArgumentParser(prog="occuslam")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the synthetic mapping pipeline")
    p.add_argument("config", type=Path, help="run configuration JSON")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--ablation", action="store_true",
                   help="run the uncertainty/fusion ablation variants")
    p.add_argument("--no-o2p", action="store_true",
                   help="disable occupancy-to-point factors (odometry only)")
    p.add_argument("--mesh", action=argparse.BooleanOptionalAction, default=True,
                   help="write the combined world mesh PLY")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        config = RunConfig.from_json(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.ablation:
            table = run_ablation(config, args.out)
            print(json.dumps(table, indent=2, sort_keys=True))
        else:
            summary = run(config, args.out, write_mesh=args.mesh,
                          o2p_override=False if args.no_o2p else None)
            print(json.dumps(summary["metrics"], indent=2, sort_keys=True))
        return 0
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        _fail(args.out, "config_error", exc)
        return 2
    except Exception as exc:  # solver failures and other mid-run aborts
        _fail(args.out, "runtime_error", exc)
        return 1


def _fail(out_dir, kind, exc):
    diag = {"error": kind, "message": str(exc), "traceback": traceback.format_exc()}
    try:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "error.json", "w") as f:
            json.dump(diag, f, indent=2)
    except OSError:
        pass
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
