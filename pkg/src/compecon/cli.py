"""Command line entry point.

Failures print one line to stderr, ``error category=<name> message=<json string>``,
and exit with a category-specific nonzero code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from compecon.harness.charts import emit_charts, load_attention_dumps
from compecon.harness.config import ConfigError, ExperimentConfig, load_config
from compecon.harness.report import ReportError, load_results
from compecon.harness.sweeps import run_experiment
from compecon.tasks import TaskError
from compecon.training import TrainingError

EXIT_CODES = {"config": 2, "io": 3, "checkpoint": 4, "training": 5, "data": 6, "internal": 1}

COMMAND_KINDS = {
    "train": "single_run",
    "sweep-budget": "budget_sweep",
    "sweep-lambda": "lambda_sweep",
    "ablate": "ablation",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compecon", description="Train, sweep and report compute-constrained transformers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMAND_KINDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, help="run a single seed (overrides config)")
        sp.add_argument("--workers", type=int, default=1, help="parallel sweep jobs")
        sp.add_argument("--no-charts", action="store_true")
    rp = sub.add_parser("report", help="re-render charts from an existing results.json")
    rp.add_argument("--config", help="unused; accepted for symmetry")
    rp.add_argument("--out", required=True, help="directory holding results.json")
    rp.add_argument("--seed", type=int)
    rp.add_argument("--workers", type=int, default=1)
    return p


def _experiment(args) -> ExperimentConfig:
    kind = COMMAND_KINDS[args.command]
    cfg = load_config(args.config) if args.config else ExperimentConfig(kind=kind)
    if cfg.kind != kind:
        raise ConfigError(f"config kind {cfg.kind!r} does not match command {args.command!r}")
    return cfg.with_overrides(seed=args.seed, out=args.out)


def _category(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, FileNotFoundError) and "checkpoint" in str(exc):
        return "checkpoint"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, TaskError):
        return "data"
    if isinstance(exc, (ReportError, OSError)):
        return "io"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            out = Path(args.out)
            results, front, _ = load_results(out / "results.json")
            for path in emit_charts(results, front, out, load_attention_dumps(out / "attention_dumps.json")):
                print(path)
            return 0
        cfg = _experiment(args)
        output = run_experiment(cfg, workers=max(1, args.workers), charts=not args.no_charts)
        print(json.dumps({"output_dir": cfg.output_dir, "results": len(output.results),
                          "pareto_points": len(output.front)}))
        return 0
    except Exception as exc:  # noqa: BLE001 - translated to an exit code
        cat = _category(exc)
        print(f"error category={cat} message={json.dumps(str(exc))}", file=sys.stderr)
        if args.verbose:
            logging.exception("failure")
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
