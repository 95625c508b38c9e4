"""Command line entry point: ``dca-sim run|list-scenarios|replay|params``."""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from ..schedule import CycleParams
from .config import ConfigError, ScenarioConfig
from .engine import Simulation
from .report import EXIT_USAGE, RunReport


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def shipped_scenarios() -> dict[str, Path]:
    root = resources.files("dca") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def resolve_config(ref: str) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    stem = path.name.split(".")[0]
    shipped = shipped_scenarios()
    if stem in shipped:
        return shipped[stem]
    raise ConfigError(f"no such config file or shipped scenario: {ref}")


def run_config(cfg: ScenarioConfig) -> RunReport:
    return Simulation(cfg).run()


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.load(resolve_config(args.config))
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    report = run_config(cfg)
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.trace:
        Path(args.trace).write_text(report.trace_text())
    lat = report["latency"]
    print(f"{cfg.name}: verdict {report.verdict}; "
          f"{lat['confirmed']}/{lat['submitted']} confirmed, {lat['secured']} secured; "
          f"{len(report['deposits_destroyed'])} deposits destroyed, {len(report['jailings'])} jailed")
    return report.exit_code


def _cmd_list(args) -> int:
    for name, path in sorted(shipped_scenarios().items()):
        data = json.loads(path.read_text())
        print(f"{name:32s} {data.get('description', '')}")
    return 0


def _cmd_replay(args) -> int:
    try:
        lines = Path(args.trace).read_text().splitlines()
        header = json.loads(lines[0])
        config = header["config"]
    except (OSError, IndexError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.trace} is not a simulator trace") from exc
    cfg = ScenarioConfig.from_dict(config, env=False)
    report = run_config(cfg)
    original = "\n".join(lines) + "\n"
    same_trace = report.trace_text() == original
    same_report = True
    if args.report:
        same_report = Path(args.report).read_text() == report.to_json()
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(f"replay {'identical' if same_trace and same_report else 'DIFFERS'}: "
          f"trace {'matches' if same_trace else 'differs'}"
          + (f", report {'matches' if same_report else 'differs'}" if args.report else ""))
    return 0 if same_trace and same_report else 1


def _cmd_params(args) -> int:
    p = CycleParams.full_scale() if args.full_scale else CycleParams.desk_scale()
    label = "full scale" if args.full_scale else "desk scale"
    print(f"{label} parameters")
    print(f"cycle length:   {p.cycle_length_s:,} s")
    print(f"slot duration:  {p.slot_duration_s} s")
    print(f"slices:         {p.slices:,}")
    print(f"confirm depth:  {p.confirm_depth}")
    print(f"cycle lag:      {p.cycle_lag_slots:,} slots")
    print(f"prep period:    {p.prep_period_slots:,} slots")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dca-sim", description="Discrete-event simulator for the consensus engine.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario config (path or shipped scenario name)")
    run.add_argument("config")
    run.add_argument("--out", help="write the JSON report here")
    run.add_argument("--trace", help="write the JSON-lines event trace here")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(func=_cmd_run)

    ls = sub.add_parser("list-scenarios", help="list shipped scenario configs")
    ls.set_defaults(func=_cmd_list)

    rp = sub.add_parser("replay", help="re-run the config embedded in a trace and compare")
    rp.add_argument("trace")
    rp.add_argument("--report", help="also compare against this report file")
    rp.add_argument("--out", help="write the regenerated report here")
    rp.set_defaults(func=_cmd_replay)

    pp = sub.add_parser("params", help="print cycle constants")
    pp.add_argument("--full-scale", action="store_true", help="production-scale constants")
    pp.set_defaults(func=_cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dca-sim: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
