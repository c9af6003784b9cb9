"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 runtime/I-O error.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter

from fleetdspl import fleetsim, trace as tracemod
from fleetdspl.variability import (
    ModelError,
    ModelTooLarge,
    SemanticError,
    derive_fconfig,
    enumerate_configurations,
    parse_model,
)

OK, INVALID, USAGE, RUNTIME = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def cmd_validate(args) -> int:
    try:
        text = _read(args.model)
    except OSError as exc:
        _err(f"cannot read {args.model}: {exc.strerror}")
        return RUNTIME
    try:
        model = parse_model(text)
    except SemanticError as exc:
        print(f"INVALID {args.model}")
        for element, message in exc.issues:
            print(f"  - {element}: {message}")
        return INVALID
    except ModelError as exc:
        print(f"INVALID {args.model}")
        print(f"  - {exc}")
        return INVALID
    print(f"OK {model.name}: {len(model.features)} features, {len(model.constraints)} constraints")
    return OK


def cmd_enumerate(args) -> int:
    try:
        model = parse_model(_read(args.model))
        result = enumerate_configurations(model, args.limit)
    except OSError as exc:
        _err(f"cannot read {args.model}: {exc.strerror}")
        return RUNTIME
    except ModelTooLarge as exc:
        _err(str(exc))
        return INVALID
    except ModelError as exc:
        _err(f"invalid model: {exc}")
        return INVALID
    for sel in result.selections:
        print(",".join(sorted(sel)))
    print(f"total: {result.total}" + (" (truncated)" if result.truncated else ""))
    return OK


def cmd_derive(args) -> int:
    try:
        model = parse_model(_read(args.model))
        scenario = json.loads(_read(args.scenario))
    except OSError as exc:
        _err(f"cannot read input: {exc}")
        return RUNTIME
    except (ModelError, json.JSONDecodeError) as exc:
        _err(f"invalid input: {exc}")
        return INVALID
    try:
        devices = fleetsim._devices(scenario.get("devices", []))
        floor = float(scenario.get("loop", {}).get("battery_floor", 10.0))
        feasible = [d for d in devices if d.reachable and d.battery > floor]
        if args.selection:
            selection = [s.strip() for s in args.selection.split(",") if s.strip()]
        else:
            selection = scenario.get("initial_selection", [])
        fc = derive_fconfig(model, selection, feasible, scenario.get("defaults", {}))
    except (ModelError, fleetsim.ScenarioError) as exc:
        _err(str(exc))
        return INVALID
    print("selection: " + ",".join(sorted(fc.selection)))
    for feature, dev in sorted(fc.bindings.items()):
        print(f"{feature} -> {dev}")
    for dev, cfg in sorted(fc.dconfigs.items()):
        params = " ".join(f"{k}={v}" for k, v in sorted(cfg.params.items()))
        print(f"{dev}: {params}".rstrip())
    return OK


def cmd_run(args) -> int:
    try:
        world = fleetsim.load_scenario_file(args.scenario, seed=args.seed)
    except OSError as exc:
        _err(f"cannot read scenario: {exc}")
        return RUNTIME
    except fleetsim.ScenarioError as exc:
        _err(str(exc))
        return INVALID
    if args.until <= 0:
        _err("--until must be positive")
        return USAGE
    try:
        with open(args.trace, "w", encoding="utf-8", newline="\n") as sink:
            fleetsim.run(world, args.until, sink)
    except OSError as exc:
        _err(f"cannot write trace: {exc}")
        return RUNTIME
    summary = world.summary()
    print(f"ticks: {summary['ticks']}")
    print(f"adaptations: {summary['adaptations']}")
    eff = summary["final_effective"]
    print("final effective: " + ("n/a" if eff is None else f"{eff:.4f}"))
    print("final fconfig: " + json.dumps(summary["fconfig"], sort_keys=True))
    if args.report:
        return _report(world.trace.events, args.report)
    return OK


def cmd_replay(args) -> int:
    try:
        events = tracemod.read_trace(args.trace)
    except OSError as exc:
        _err(f"cannot read trace: {exc}")
        return RUNTIME
    except tracemod.TraceFormatError as exc:
        _err(f"malformed trace: {exc}")
        return RUNTIME
    if args.verbose:
        for ev in events:
            print(f"{ev.t:>6} {ev.kind:<10} {json.dumps(ev.payload, sort_keys=True)[:100]}")
    counts = Counter(ev.kind for ev in events)
    for kind in tracemod.EVENT_KINDS:
        if counts[kind]:
            print(f"{kind}: {counts[kind]}")
    violation = tracemod.check_trace(events)
    if violation is not None:
        print(f"FAIL {violation}")
        return INVALID
    print(f"OK {len(events)} events")
    return OK


def _report(events, out_dir: str) -> int:
    from fleetdspl.report import render_report

    try:
        csv_path, png_path = render_report(events, out_dir)
    except OSError as exc:
        _err(f"cannot write report: {exc}")
        return RUNTIME
    print(f"report: {csv_path}")
    print(f"figure: {png_path}")
    return OK


def cmd_report(args) -> int:
    try:
        events = tracemod.read_trace(args.trace)
    except OSError as exc:
        _err(f"cannot read trace: {exc}")
        return RUNTIME
    except tracemod.TraceFormatError as exc:
        _err(f"malformed trace: {exc}")
        return RUNTIME
    return _report(events, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetdspl", description="IoT fleet product-line adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a feature model file")
    p.add_argument("model")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("enumerate", help="list every valid selection of a model")
    p.add_argument("model")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("derive", help="bind a selection to a scenario's devices")
    p.add_argument("model")
    p.add_argument("scenario")
    p.add_argument("--selection", help="comma-separated features (default: scenario initial_selection)")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("run", help="simulate a scenario and write its trace")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--until", type=int, required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--report", metavar="DIR", help="also write timeline.csv and timeline.png to DIR")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="summarize a trace and verify its invariants")
    p.add_argument("trace")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="render a trace as CSV and PNG")
    p.add_argument("trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
