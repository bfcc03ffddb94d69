"""Command-line entry point: ``memdos run|sweep|report``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from pathlib import Path

from .harness import export_trace, replay_ks, run_scenario, sweep
from .scenario import ScenarioError, load_scenario
from .topology import InvalidConfig
from .trace import read_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUT_ENV = "MEMDOS_OUT"


def _seed_range(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s]


def _out_dir(arg: str | None) -> Path:
    path = Path(arg or os.environ.get(OUT_ENV) or "memdos-out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_run(args) -> int:
    config = load_scenario(args.scenario)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.oracle:
        config = config.replace(oracle_checks=True)
    report = run_scenario(config)
    out = _out_dir(args.out)
    stem = f"{config.name}-seed{config.seed}"
    (out / f"{stem}.report.json").write_text(report.to_json() + "\n")
    if args.trace:
        export_trace(report, out / f"{stem}.trace.jsonl")
    print(f"{config.name} seed={config.seed} suspected={report.suspected} "
          f"identified={report.identified} attackers={report.attackers}")
    for vm_id, vr in report.vms.items():
        sd = "-" if vr.slowdown is None else f"{vr.slowdown:.3f}"
        print(f"  {vm_id:<12} {vr.role:<10} throughput={vr.throughput:.3f} ops/ms slowdown={sd}")
    print(f"report: {out / (stem + '.report.json')}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = load_scenario(args.scenario)
    result = sweep(config, args.seeds)
    out = _out_dir(args.out)
    path = out / f"{config.name}-sweep.json"
    path.write_text(result.to_json() + "\n")
    print(f"{config.name} seeds={args.seeds[0]}..{args.seeds[-1]} tp_rate={result.tp_rate:.3f} "
          f"fp_rate={result.fp_rate:.3f} single_test_fp_rate={result.single_test_fp_rate:.3f}")
    print(f"report: {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    records = read_trace(args.trace)
    kinds = Counter(r["kind"] for r in records)
    replay = replay_ks(records)
    mismatched = sum(1 for logged, again in replay if logged != again)
    summary = {
        "records": len(records),
        "kinds": dict(sorted(kinds.items())),
        "rejections": sum(1 for r in records
                          if r["kind"] == "ks_decision" and r["payload"]["verdict"] == "reject"),
        "phase_changes": [
            {"time_ms": r["time_ms"], "from": r["payload"]["from"], "to": r["payload"]["to"]}
            for r in records if r["kind"] == "phase_change"
        ],
        "replayed_ks": len(replay),
        "replay_mismatches": mismatched,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK if mismatched == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memdos", description="Memory DoS attack and defense simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./memdos-out)")
    run.add_argument("--trace", action="store_true", help="also write the JSON-lines trace")
    run.add_argument("--oracle", action="store_true", help="enable ground-truth oracle checks")
    run.set_defaults(func=_cmd_run)

    sw = sub.add_parser("sweep", help="run a scenario over a seed range")
    sw.add_argument("scenario")
    sw.add_argument("--seeds", type=_seed_range, required=True, help="A..B (inclusive) or a,b,c")
    sw.add_argument("--out")
    sw.set_defaults(func=_cmd_sweep)

    rep = sub.add_parser("report", help="summarize a trace and replay its KS decisions")
    rep.add_argument("trace")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, InvalidConfig, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
