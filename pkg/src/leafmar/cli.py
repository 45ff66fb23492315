"""``leafmar`` command-line front end.

Exit codes: 0 success, 1 usage, 2 validation, 3 infeasible, 4 I/O.
Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import yaml

from .energy_model import DomainError, ProfileError
from .harness import (
    Scenario,
    ScenarioError,
    default_scenario,
    load_scenario,
    run_aio_scenario,
    run_leaf_scenario,
)
from .leaf_solver import Allocation, InfeasibleError, solve
from .profiles import default_profile, default_profile_text, load_profile

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_IO = range(5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, *, scenario: bool = True, output: bool = True) -> None:
    p.add_argument("--profile", help="device profile YAML (default: bundled profile)")
    if scenario:
        p.add_argument("--scenario", help="scenario YAML (default: bundled ten-client scenario)")
        p.add_argument("--seed", type=int, help="seed for synthetic traces")
        p.add_argument("--bmax", type=float, help="total bandwidth in Mbps, replaces the scenario list")
        p.add_argument("--lambda1", type=float, help="latency weight for every client")
        p.add_argument("--lambda2", type=float, help="accuracy weight for every client")
        p.add_argument("--theta-ratio", type=float, help="single theta1/theta2 ratio for offloading runs")
        p.add_argument("--tau", type=float, help="relative convergence tolerance of the solver")
        p.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
    if output:
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leafmar", description="Energy-aware configuration of mobile AR clients.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("validate", help="check a profile and optionally a scenario"), output=False)
    p = sub.add_parser("solve", help="run LEAF once and print the allocation")
    _common(p)
    p.set_defaults(format="json")
    _common(sub.add_parser("sweep", help="LEAF and baselines over the b_max and preference axes"))
    _common(sub.add_parser("aio-run", help="offloading policies over the theta axis"))
    _common(sub.add_parser("emit-default-profile", help="write the bundled device profile"), scenario=False)
    return parser


def _load_inputs(args: argparse.Namespace):
    profile = load_profile(args.profile) if args.profile else default_profile()
    if not hasattr(args, "scenario"):
        return profile, None
    scenario = load_scenario(args.scenario) if args.scenario else default_scenario()
    return profile, _apply_overrides(scenario, args)


def _apply_overrides(scenario: Scenario, args: argparse.Namespace) -> Scenario:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.bmax is not None:
        changes["b_max"] = (args.bmax,)
    if args.theta_ratio is not None:
        changes["offload_sweep"] = (args.theta_ratio,)
    if args.tau is not None:
        changes["solver"] = replace(scenario.solver, tau=args.tau)
    prefs = {k: v for k, v in (("lambda1", args.lambda1), ("lambda2", args.lambda2)) if v is not None}
    if prefs:
        changes["clients"] = tuple(replace(c, **prefs) for c in scenario.clients)
    return replace(scenario, **changes) if changes else scenario


def allocation_summary(alloc: Allocation) -> dict:
    return {
        "b_max": alloc.b_max,
        "sum_b": sum(c.b for c in alloc.configs),
        "q_value": alloc.q_value,
        "q_relaxed": alloc.q_relaxed,
        "q_initial": alloc.q_initial,
        "rounding_gap": alloc.rounding_gap,
        "iterations": alloc.iterations,
        "converged": alloc.converged,
        "status": alloc.status,
        "latency_bounds": alloc.latency_bounds,
        "configs": [{"client": i, "f": c.f, "s": c.s, "b": c.b} for i, c in enumerate(alloc.configs)],
        "trace": alloc.trace,
    }


def _allocation_csv(alloc: Allocation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("client", "f", "s", "b"))
    for i, c in enumerate(alloc.configs):
        w.writerow((i, repr(c.f), repr(c.s), repr(c.b)))
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _run(args: argparse.Namespace) -> int:
    if args.command == "emit-default-profile":
        _emit(default_profile_text(), args.out)
        return EXIT_OK
    profile, scenario = _load_inputs(args)
    if args.command == "validate":
        sys.stdout.write(json.dumps({"ok": True, "profile": profile.name,
                                     "clients": len(scenario.clients)}) + "\n")
    elif args.command == "solve":
        alloc = solve(profile, scenario.clients, scenario.solver, b_max=scenario.b_max[0])
        if args.format == "json":
            text = json.dumps(allocation_summary(alloc), indent=2) + "\n"
        else:
            text = _allocation_csv(alloc)
        _emit(text, args.out)
    else:
        runner = run_leaf_scenario if args.command == "sweep" else run_aio_scenario
        report = runner(profile, scenario, workers=args.workers)
        _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.out)
    return EXIT_OK


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    try:
        return _run(args)
    except InfeasibleError as exc:
        return _fail(EXIT_INFEASIBLE, "infeasible", str(exc), clients=list(exc.clients))
    except (ProfileError, ScenarioError, DomainError, yaml.YAMLError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))


if __name__ == "__main__":
    sys.exit(main())
