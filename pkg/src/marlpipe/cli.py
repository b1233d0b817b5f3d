"""Command-line front end: ``marlpipe run`` and ``marlpipe compare``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PipelineMode, RunConfig, load_config, validate
from .errors import ConfigError, StallDetected
from .metrics import MetricsReport, summary_csv
from .orchestrator import Orchestrator


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "mode", None):
        PipelineMode.parse(args.mode)
        cfg = cfg.replace(pipeline={"mode": args.mode})
    if args.seed is not None:
        cfg = cfg.replace(pipeline={"seed": args.seed})
    validate(cfg)
    return cfg


def _write_report(report: MetricsReport, json_path: Path) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report.to_json())
    stem = json_path.with_suffix("")
    Path(f"{stem}.queue.csv").write_text(report.queue_csv())
    Path(f"{stem}.utilization.csv").write_text(report.utilization_csv())


def _execute(cfg: RunConfig, mode: str, trace: str | None) -> MetricsReport:
    orch = Orchestrator(cfg, mode)
    try:
        return orch.run().report
    finally:
        if trace:
            orch.sim.dump_log(trace)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    report = _execute(cfg, cfg.mode.value, args.trace)
    _write_report(report, Path(args.out))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out_dir = Path(args.out_dir)
    reports = []
    for mode in PipelineMode:
        trace = str(out_dir / f"{mode.value}.ndjson") if args.trace else None
        out_dir.mkdir(parents=True, exist_ok=True)
        report = _execute(cfg, mode.value, trace)
        _write_report(report, out_dir / f"{mode.value}.json")
        reports.append(report)
    (out_dir / "summary.csv").write_text(summary_csv(reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marlpipe", description="Simulated multi-agent RL pipeline runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one pipeline mode")
    run.add_argument("--config", help="JSON config file (defaults when omitted)")
    run.add_argument("--mode", help="pipeline mode, overrides the config")
    run.add_argument("--out", required=True, help="metrics JSON path; CSV traces are written next to it")
    run.add_argument("--trace", help="write the NDJSON event log here")
    run.add_argument("--seed", type=int, help="override the workload seed")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="run all four modes on the same workload")
    cmp.add_argument("--config", help="JSON config file (defaults when omitted)")
    cmp.add_argument("--out-dir", required=True)
    cmp.add_argument("--seed", type=int)
    cmp.add_argument("--trace", action="store_true", help="also write one event log per mode")
    cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except StallDetected as exc:
        print(f"stall detected: {exc}", file=sys.stderr)
        return 2
