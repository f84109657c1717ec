"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 agent transport failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .backends import ConfigurationError, ReplayError
from .controllers import ConfigError
from .harness import cmd_montecarlo, load_config, lqr_audit, optimize, plotdata, replay, table_csv
from .lqr import UnstabilizableError
from .plants import PLANT_IDS, PlantError, make_plant

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctrlagents", description="Agent-driven controller tuning harness.")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="run the tuning loop from a config file")
    o.add_argument("--config", required=True)
    o.add_argument("--seed", type=int)
    o.add_argument("--out", help="run directory (default runs/<timestamp>-<plant>)")

    r = sub.add_parser("replay", help="run a replay config and compare against its reference log")
    r.add_argument("--config", required=True)
    r.add_argument("--out")

    m = sub.add_parser("montecarlo", help="mean metrics over seeded episodes per scenario and method")
    m.add_argument("--config", required=True)
    m.add_argument("--runs", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    m.add_argument("--out", help="CSV path (default: stdout)")

    q = sub.add_parser("lqr", help="LQR gains for a plant or a custom (A, B)")
    q.add_argument("--config", help="JSON with plant or A/B plus lqr.q and lqr.r")
    q.add_argument("--plant", choices=PLANT_IDS)
    q.add_argument("--q", type=float, nargs="+", help="diagonal of Q in feedback order")
    q.add_argument("--r", type=float)
    q.add_argument("--out", help="audit JSON path")

    d = sub.add_parser("plotdata", help="evolution and best-trajectory CSVs from a run directory")
    d.add_argument("run_dir")
    d.add_argument("--out")
    return p


def _optimize(args) -> int:
    cfg = load_config(args.config)
    res = optimize(cfg, Path(args.out) if args.out else None, args.seed)
    for line in res.log_lines:
        print(line)
    print(f"{res.report.summary} ({res.report.status}); run directory {res.run_dir}")
    return EXIT_TRANSPORT if res.report.status == "transport_error" else EXIT_OK


def _replay(args) -> int:
    cfg = load_config(args.config)
    res, cmp = replay(cfg, Path(args.out) if args.out else None)
    for line in res.log_lines:
        print(line)
    print(res.report.summary)
    if cmp is not None:
        print(f"structure match: {cmp['structure_match']}; fields off by more than "
              f"{cmp['rel_tol']:.0%}: {', '.join(cmp['flagged_fields']) or 'none'}")
    return EXIT_TRANSPORT if res.report.status == "transport_error" else EXIT_OK


def _montecarlo(args) -> int:
    cfg = load_config(args.config)
    rows = cmd_montecarlo(cfg, args.runs, args.seed, args.jobs)
    text = table_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _lqr(args) -> int:
    A = B = plant = None
    q, r = args.q, args.r
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        sec = raw.get("lqr", {})
        q = q or sec.get("q")
        r = r if r is not None else sec.get("r")
        A, B = sec.get("A"), sec.get("B")
        if A is None:
            plant = make_plant(raw["plant"], raw.get("plant_params"), raw.get("variant", "acceleration"))
    elif args.plant:
        plant = make_plant(args.plant)
    if (plant is None and A is None) or q is None or r is None:
        raise ConfigError("lqr needs a plant (or A and B), --q and --r")
    audit = lqr_audit(plant, q, r, A, B)
    print("K = " + ", ".join(f"{k}={v:.6g}" for k, v in audit["K"].items()))
    print("closed-loop eigenvalues: " + ", ".join(f"{re:.4g}{im:+.4g}j" for re, im in audit["closed_loop_eigenvalues"]))
    if args.out:
        Path(args.out).write_text(json.dumps(audit, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _plotdata(args) -> int:
    for p in plotdata(Path(args.run_dir), Path(args.out) if args.out else None):
        print(p)
    return EXIT_OK


_COMMANDS = {"optimize": _optimize, "replay": _replay, "montecarlo": _montecarlo, "lqr": _lqr, "plotdata": _plotdata}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ConfigurationError, PlantError, ReplayError, UnstabilizableError,
            FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
