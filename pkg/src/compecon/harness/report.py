"""CSV/JSON report emission.

``results.csv`` columns, in order::

    experiment, label, provenance, seed, lambda, constraint_mode, budget_k,
    lambda_sparse, cost_alpha, cost_beta, loss, perplexity, accuracy,
    mean_gini, mean_entropy_bits, flops_dense, flops_effective,
    ffn_sparsity_fraction, attention_support_fraction, latency_ms

``latency_ms`` is informational (wall clock) and is the only column allowed
to differ between reruns of the same config.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from compecon.economics import RunResult
from compecon.harness.pareto import ParetoPoint

SCHEMA = "compecon-results"
SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "experiment", "label", "provenance", "seed", "lambda", "constraint_mode", "budget_k",
    "lambda_sparse", "cost_alpha", "cost_beta", "loss", "perplexity", "accuracy",
    "mean_gini", "mean_entropy_bits", "flops_dense", "flops_effective",
    "ffn_sparsity_fraction", "attention_support_fraction", "latency_ms",
]
INFORMATIONAL_COLUMNS = ("latency_ms",)
PARETO_COLUMNS = ["flops", "metric", "provenance", "label", "seed"]


class ReportError(OSError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def result_row(r: RunResult, experiment: str = "") -> list[str]:
    cost = (r.config or {}).get("cost", {})
    m = r.metrics
    row = [
        experiment, r.label, r.provenance, r.seed, float(r.lambda_incentive),
        r.constraint.get("mode", "none"), r.constraint.get("budget_k", 0),
        float(r.constraint.get("lambda_sparse", 0.0)),
        float(cost.get("alpha", 0.0)), float(cost.get("beta", 0.0)),
        r.loss, r.perplexity, r.accuracy, m.mean_gini, m.mean_entropy_bits,
        m.flops_dense, m.flops_effective, m.ffn_sparsity_fraction,
        m.attention_support_fraction, r.latency_ms,
    ]
    return [_fmt(v) for v in row]


def results_csv(results: Sequence[RunResult], experiment: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow(result_row(r, experiment))
    return buf.getvalue()


def pareto_csv(front: Sequence[ParetoPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PARETO_COLUMNS)
    for p in front:
        w.writerow([_fmt(float(p.flops)), _fmt(float(p.metric)), p.provenance, p.label, p.seed])
    return buf.getvalue()


def results_document(results, front, experiment: str = "", extra: dict | None = None) -> dict:
    return {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "experiment": experiment,
        "results": [r.to_dict() for r in results],
        "pareto": [p.to_dict() for p in front],
        "extra": extra or {},
    }


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def emit_report(
    results: Sequence[RunResult],
    front: Sequence[ParetoPoint],
    output_dir: str | Path,
    experiment: str = "",
    extra: dict | None = None,
) -> dict[str, Path]:
    """Write results.csv, results.json and pareto.csv; returns their paths."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc}") from exc
    paths = {name: out / name for name in ("results.csv", "results.json", "pareto.csv")}
    _write(paths["results.csv"], results_csv(results, experiment))
    doc = results_document(results, front, experiment, extra)
    _write(paths["results.json"], json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(paths["pareto.csv"], pareto_csv(front))
    return paths


def load_results(path: str | Path) -> tuple[list[RunResult], list[ParetoPoint], dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    if doc.get("schema") != SCHEMA or doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported results schema {doc.get('schema')} v{doc.get('version')}")
    results = [RunResult.from_dict(r) for r in doc["results"]]
    front = [ParetoPoint(**p) for p in doc["pareto"]]
    return results, front, doc
