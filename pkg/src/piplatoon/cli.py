"""Command-line entry points: run, explore, check, replay.

Exit codes: 0 success, 1 diagnostics (bad input, failed check, mismatch),
2 safety-invariant violation found in a trace.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .calculus import CalculusError
from .dsl import ParseError, check, parse
from .explorer import Bounds, explore, initial_state, joined_goal, parse_owners
from .protocol import platoon_env
from .sim import (
    ConfigError,
    load_scenario,
    metrics_from_trace,
    read_trace,
    run_scenario,
    safety_violations,
    trace_digest,
    trace_text,
)

OK, DIAGNOSTICS, UNSAFE = 0, 1, 2


def _cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = dataclasses.replace(sc, seed=args.seed)
    trace, metrics = run_scenario(sc)
    text = trace_text(trace)
    digest = trace_digest(text)
    if args.trace:
        Path(args.trace).write_text(text)
    data = {**metrics.to_dict(), "seed": sc.seed, "d": sc.d, "trace_sha256": digest}
    if args.metrics:
        Path(args.metrics).write_text(json.dumps(data, indent=2) + "\n")
    if args.figures:
        from .plotting import plot_trace

        stem = sc.name or Path(args.scenario).stem
        for p in plot_trace(trace, args.figures, sc.d, stem):
            print(f"figure: {p}")
    for key in ("merges_completed", "merge_times", "min_gap", "final_gap_rms", "deadlock_flag"):
        print(f"{key}: {json.dumps(data[key])}")
    print(f"trace_sha256: {digest}")
    bad = safety_violations(trace, sc.d)
    if bad:
        print(f"safety violation: {bad[0]} ({len(bad)} ticks)", file=sys.stderr)
        return UNSAFE
    return OK


def _load_env(path: str) -> dict:
    base = platoon_env()
    env, _ = parse(Path(path).read_text(), base)
    return {**base, **env}


def _cmd_explore(args) -> int:
    env = _load_env(args.program)
    init = initial_state(parse_owners(args.owners), env)
    goal = joined_goal(init) if args.goal == "joined" else None
    res = explore(init, env, goal, Bounds(max_states=args.max_states, max_depth=args.max_depth))
    print(res.summary())
    if goal is not None and not res.truncated:
        print(f"goal inevitable: {res.goal_inevitable}")
    for state, trace in res.deadlocks[: args.show]:
        print("deadlock trace: " + " ".join(map(str, trace)))
    if res.deadlocks or (goal is not None and not res.goal_reached):
        return DIAGNOSTICS
    return OK


def _cmd_check(args) -> int:
    text = Path(args.program).read_text()
    diags = check(text, platoon_env())
    for d in diags:
        print(f"{args.program}:{d}")
    if diags:
        return DIAGNOSTICS
    print(f"{args.program}: ok")
    return OK


def _cmd_replay(args) -> int:
    with open(args.trace, newline="") as f:
        trace = read_trace(f)
    text = trace_text(trace)
    digest = trace_digest(text)
    status = OK
    if text != Path(args.trace).read_text():
        print("trace does not round-trip through the parser", file=sys.stderr)
        status = DIAGNOSTICS
    m = metrics_from_trace(trace)
    d = args.d
    if args.metrics:
        stored = json.loads(Path(args.metrics).read_text())
        d = stored.get("d", d)
        if stored.get("trace_sha256") != digest:
            print("determinism hash mismatch against metrics", file=sys.stderr)
            status = DIAGNOSTICS
        if stored.get("min_gap") != m.to_dict()["min_gap"]:
            print("min_gap mismatch against metrics", file=sys.stderr)
            status = DIAGNOSTICS
    if args.scenario:
        sc = load_scenario(args.scenario)
        if args.seed is not None:
            sc = dataclasses.replace(sc, seed=args.seed)
        d = sc.d
        rerun = trace_digest(trace_text(run_scenario(sc)[0]))
        print(f"rerun_sha256: {rerun}")
        if rerun != digest:
            print("determinism hash mismatch against re-run", file=sys.stderr)
            status = DIAGNOSTICS
    summary = m.to_dict()
    for key in ("merges_completed", "merge_times", "min_gap", "deadlock_flag"):
        print(f"{key}: {json.dumps(summary[key])}")
    print(f"trace_sha256: {digest}")
    bad = safety_violations(trace, d)
    if bad:
        print(f"safety violation: {bad[0]} ({len(bad)} ticks)", file=sys.stderr)
        return UNSAFE
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="piplatoon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a scenario")
    r.add_argument("scenario")
    r.add_argument("--trace")
    r.add_argument("--metrics")
    r.add_argument("--seed", type=int)
    r.add_argument("--figures", help="directory for PNG figures")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("explore", help="exhaustively explore a protocol instance")
    e.add_argument("program")
    e.add_argument("--owners", required=True, help="comma-separated role codes, e.g. L,F,F,J")
    e.add_argument("--max-states", type=int, default=100_000)
    e.add_argument("--max-depth", type=int, default=10_000)
    e.add_argument("--goal", choices=["joined"])
    e.add_argument("--show", type=int, default=3, help="deadlock traces to print")
    e.set_defaults(func=_cmd_explore)

    c = sub.add_parser("check", help="parse a program and report diagnostics")
    c.add_argument("program")
    c.set_defaults(func=_cmd_check)

    rp = sub.add_parser("replay", help="recompute metrics from a trace")
    rp.add_argument("trace")
    rp.add_argument("--metrics", help="metrics file to compare against")
    rp.add_argument("--scenario", help="re-run this scenario and compare hashes")
    rp.add_argument("--seed", type=int)
    rp.add_argument("--d", type=float, default=10.0)
    rp.set_defaults(func=_cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, CalculusError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DIAGNOSTICS


if __name__ == "__main__":
    sys.exit(main())
