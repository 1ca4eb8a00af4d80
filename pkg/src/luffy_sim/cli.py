"""Command-line entry point: ``luffy-sim {gen-trace,simulate,compare,sweep}``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .config import ConfigError, SimConfig, load_config, read_config_file
from .engine import STRATEGIES, get_strategy, run_many
from .migration import MigrationError
from .report import ReportError, csv_text, format_table, summarize, to_csv, to_json
from .workload import CapacityError, TraceError, gen_batch, load_trace, save_trace

log = logging.getLogger("luffy_sim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# config-file equivalents of the run flags, read from the ``run`` section
RUN_DEFAULTS: Dict[str, Any] = {"strategy": "luffy", "strategies": "vanilla,ext,hyt,luffy",
                                "iterations": 3, "experts": "2,4,8,16", "jobs": 1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _setup_logging() -> None:
    level = os.environ.get("LUFFY_SIM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="luffy-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--config", help="JSON or YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable); wins over the file")
        p.add_argument("--seed", type=int, help="workload seed (config: workload.seed)")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("gen-trace", help="write a synthetic batch as a trace file")
    common(p, "trace path")

    p = sub.add_parser("simulate", help="simulate one strategy, write per-block CSV")
    common(p, "CSV path")
    p.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)}")
    p.add_argument("--iters", type=int, help="iterations (config: run.iterations)")
    p.add_argument("--trace", help="replay this trace instead of generating batches")
    p.add_argument("--meta", help="metadata JSON path (default: <out>.meta.json)")

    p = sub.add_parser("compare", help="run strategies on identical batches, write a summary")
    common(p, "summary JSON path")
    p.add_argument("--strategies", help="comma-separated strategy names")
    p.add_argument("--iters", type=int)
    p.add_argument("--trace")
    p.add_argument("--csv", help="also write every strategy's per-block CSV here")

    p = sub.add_parser("sweep", help="compare strategies across expert counts")
    common(p, "sweep JSON path")
    p.add_argument("--experts", help="comma-separated expert counts (devices follow)")
    p.add_argument("--strategies")
    p.add_argument("--iters", type=int)
    p.add_argument("--jobs", type=int, help="parallel sweep points")
    return parser


def _split(value: str | Sequence[str]) -> List[str]:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def _resolve(args) -> tuple[SimConfig, Dict[str, Any]]:
    data = read_config_file(args.config) if args.config else {}
    run_section = dict(RUN_DEFAULTS)
    run_section.update(data.pop("run", None) or {})
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"workload.seed={args.seed}")
    cfg = load_config(data=data, overrides=overrides)
    for key, flag in (("strategy", "strategy"), ("strategies", "strategies"),
                      ("iterations", "iters"), ("experts", "experts"), ("jobs", "jobs")):
        value = getattr(args, flag, None)
        if value is not None:
            run_section[key] = value
    if int(run_section["iterations"]) < 1:
        raise ConfigError("iterations must be >= 1")
    if int(run_section["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    for name in [run_section["strategy"]] + _split(run_section["strategies"]):
        try:
            get_strategy(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not _split(run_section["strategies"]):
        raise ConfigError("strategies must be nonempty")
    return cfg, run_section


def _meta(cfg: SimConfig, command: str, run_section: Dict[str, Any]) -> Dict[str, Any]:
    return {"command": command, "config": cfg.to_dict(),
            "run": {k: run_section[k] for k in sorted(run_section)}}


def _compare(cfg: SimConfig, strategies: List[str], iterations: int, trace=None):
    names = strategies if "vanilla" in strategies else ["vanilla"] + strategies
    runs = run_many(cfg, names, iterations, trace=trace)
    return runs, summarize(runs)


def _sweep_config(cfg: SimConfig, n: int) -> SimConfig:
    """One expert per device, ``n`` of each."""
    return replace(cfg, model=replace(cfg.model, experts_per_layer=n),
                   cluster=replace(cfg.cluster, num_devices=n, expert_placement=None))


def _sweep_point(args) -> tuple[int, Dict[str, Any]]:
    cfg, n, strategies, iterations = args
    _, summary = _compare(_sweep_config(cfg, n), strategies, iterations)
    return n, summary.to_dict()


def _cmd_gen_trace(args, cfg, run_section) -> None:
    save_trace(gen_batch(cfg.model, cfg.cluster, cfg.workload, loss_initial=cfg.loss.l_ini), args.out)


def _cmd_simulate(args, cfg, run_section) -> None:
    trace = load_trace(args.trace) if args.trace else None
    name = get_strategy(run_section["strategy"]).name
    runs = run_many(cfg, ["vanilla"] if name == "vanilla" else ["vanilla", name],
                    int(run_section["iterations"]), trace=trace)
    to_csv(runs[name], args.out)
    meta_path = args.meta or f"{args.out}.meta.json"
    to_json(meta_path, summary=summarize(runs), meta=_meta(cfg, "simulate", run_section))


def _cmd_compare(args, cfg, run_section) -> None:
    trace = load_trace(args.trace) if args.trace else None
    runs, summary = _compare(cfg, _split(run_section["strategies"]),
                             int(run_section["iterations"]), trace)
    to_json(args.out, summary=summary, reports=[r for reps in runs.values() for r in reps],
            meta=_meta(cfg, "compare", run_section))
    if args.csv:
        text = "".join(csv_text(reps) if i == 0 else csv_text(reps).split("\n", 1)[1]
                       for i, reps in enumerate(runs.values()))
        try:
            Path(args.csv).write_text(text)
        except OSError as exc:
            raise ReportError(f"cannot write {args.csv}: {exc}") from exc
    print(format_table(summary))


def _cmd_sweep(args, cfg, run_section) -> None:
    try:
        experts = [int(x) for x in _split(run_section["experts"])]
    except ValueError:
        raise ConfigError(f"bad expert list {run_section['experts']!r}") from None
    if not experts or min(experts) < 1:
        raise ConfigError("expert counts must be >= 1")
    strategies = _split(run_section["strategies"])
    iterations = int(run_section["iterations"])
    jobs = int(run_section["jobs"])
    tasks = [(cfg, n, strategies, iterations) for n in experts]
    for _, n, _, _ in tasks:
        problems = _sweep_config(cfg, n).problems()
        if problems:
            raise ConfigError(f"sweep point {n}: {'; '.join(problems)}")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    doc = {"meta": _meta(cfg, "sweep", run_section),
           "points": {str(n): summary for n, summary in results}}
    try:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write {args.out}: {exc}") from exc


COMMANDS = {"gen-trace": _cmd_gen_trace, "simulate": _cmd_simulate, "compare": _cmd_compare,
            "sweep": _cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg, run_section = _resolve(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg, run_section)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MigrationError, CapacityError, TraceError, ReportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
