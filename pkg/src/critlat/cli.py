"""Command-line front end: one subcommand per experiment kind.

    critlat <kind> --config path.json [--seed-override N] [--jobs K]

The subcommand must match the ``experiment`` field of the config (a run is
fully described by its config file; the subcommand is a guard against
launching the wrong file).  Worker count resolution: --jobs flag, then the
config's ``jobs`` key, then the CRITLAT_JOBS environment variable, then 1.

Exit status: 0 on success, 2 when the run finished but some sweep cells
failed (their status rows are in the report), 1 on config or I/O errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="critlat",
        description="numerical experiments for the critical long-range "
        "conductance lattice",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in harness.EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} config")
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument(
            "--seed-override",
            type=int,
            default=None,
            help="replace the config's seed selection by this single seed",
        )
        p.add_argument(
            "--jobs",
            type=int,
            default=None,
            help="worker processes for sweep cells",
        )
    return parser


def _resolve_jobs(args, cfg: dict) -> int:
    if args.jobs is not None:
        jobs = args.jobs
    elif "jobs" in cfg:
        jobs = cfg["jobs"]
    else:
        jobs = int(os.environ.get("CRITLAT_JOBS", "1"))
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    return jobs


def _apply_seed_override(cfg: dict, seed: int | None) -> dict:
    if seed is None:
        return cfg
    out = dict(cfg)
    if "seeds" in cfg:
        out["seeds"] = [int(seed)]
    elif "seed" in cfg:
        out["seed"] = int(seed)
    else:
        print(
            f"note: {cfg['experiment']} takes no seeds; override ignored",
            file=sys.stderr,
        )
    return out


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config)
        if cfg["experiment"] != args.kind:
            raise ValueError(
                f"config is a {cfg['experiment']!r} experiment, "
                f"but the {args.kind!r} subcommand was invoked"
            )
        cfg = _apply_seed_override(cfg, args.seed_override)
        jobs = _resolve_jobs(args, cfg)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    csv_path, json_path, failures = harness.run_experiment(cfg, jobs=jobs)
    print(f"wrote {csv_path} and {json_path}")
    if failures:
        print(f"{failures} cell(s) failed; see status column", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
