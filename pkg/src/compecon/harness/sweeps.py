"""Experiment protocols: single runs, budget sweeps, lambda sweeps, ablations."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from compecon.constraints import ConstraintSpec
from compecon.economics import CostConfig, RunResult
from compecon.harness.charts import emit_charts, save_attention_dumps
from compecon.harness.config import ExperimentConfig, TaskSpec, dump_config
from compecon.harness.pareto import ParetoPoint, compute_pareto_front
from compecon.harness.report import emit_report
from compecon.model import ModelConfig, TransformerModel, forward, init_model, load_checkpoint, save_checkpoint
from compecon.tasks import Splits, default_corpus_path, load_char_corpus, make_classification_task, make_copy_task
from compecon.training import evaluate, train

log = logging.getLogger(__name__)

ABLATION_ARMS = {
    "both": (1.0, 1.0),
    "attention_only": (1.0, 0.0),
    "ffn_only": (0.0, 1.0),
}


@dataclass
class ExperimentOutput:
    results: list[RunResult]
    front: list[ParetoPoint] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    dumps: dict = field(default_factory=dict)


def build_task(spec: TaskSpec) -> Splits:
    if spec.kind == "copy":
        return make_copy_task(spec.seq_len, spec.vocab, spec.num_salient, spec.n_examples, spec.seed,
                              spec.split_fractions)
    if spec.kind == "classify":
        return make_classification_task(spec.seq_len, spec.vocab, spec.num_salient, spec.n_examples,
                                        spec.seed, spec.split_fractions)
    path = spec.corpus_path or default_corpus_path()
    return load_char_corpus(path, spec.seq_len, spec.split_fractions, spec.seed)


def resolve_model_config(cfg: ExperimentConfig, splits: Splits, seed: int) -> ModelConfig:
    """Fit vocabulary, sequence length and head size to the task; seed the init."""
    return replace(
        cfg.model,
        vocab_size=splits.train.vocab_size,
        max_seq_len=max(splits.train.seq_len, 2),
        num_classes=2 if cfg.task.kind == "classify" else 0,
        seed=seed,
    )


def _eval_split(cfg: ExperimentConfig, splits: Splits):
    return getattr(splits, cfg.eval_split)


def _snapshot(cfg: ExperimentConfig, lam: float, seed: int, cost: CostConfig, **more) -> dict:
    return {"lambda": lam, "seed": seed, "cost": cost.to_dict(), "task": cfg.task.kind, **more}


def _attention_sample(model: TransformerModel, tokens, spec: ConstraintSpec) -> list:
    _, tr = forward(model, tokens, spec, trace=True)
    return tr.attention_matrix(0, 0).tolist()


def train_model(cfg: ExperimentConfig, splits: Splits, seed: int, lam: float, cost: CostConfig):
    """Initialise from ``seed`` and train with incentive weight ``lam``."""
    model = init_model(resolve_model_config(cfg, splits, seed))
    tcfg = replace(cfg.train, lambda_incentive=lam, cost=cost, seed=seed)
    untrained = evaluate(model, splits.val, max_examples=cfg.eval_max_examples)
    report = train(model, splits.train, splits.val, tcfg)
    return model, report, untrained


def _evaluate(cfg, model, ds, spec, seed, lam, provenance, label, snapshot) -> RunResult:
    r = evaluate(model, ds, spec, max_examples=cfg.eval_max_examples, latency=cfg.measure_latency,
                 label=label, seed=seed, lambda_incentive=lam, provenance=provenance)
    r.config = snapshot
    return r


# ---------------------------------------------------------------------------
# Jobs (top-level so they pickle for process workers)
# ---------------------------------------------------------------------------


def _single_job(cfg: ExperimentConfig, seed: int) -> dict:
    splits = build_task(cfg.task)
    lam = cfg.train.lambda_incentive
    model, report, untrained = train_model(cfg, splits, seed, lam, cfg.train.cost)
    out = Path(cfg.output_dir) / "checkpoints" / f"seed{seed}.npz"
    save_checkpoint(model, out, extra={"lambda": lam, "seed": seed})
    snap = _snapshot(cfg, lam, seed, cfg.train.cost, init_checksum=report.init_checksum,
                     steps_run=report.steps_run, best_step=report.best_step,
                     untrained_perplexity=untrained.perplexity, untrained_accuracy=untrained.accuracy)
    r = _evaluate(cfg, model, _eval_split(cfg, splits), ConstraintSpec(), seed, lam,
                  "incentive" if lam > 0 else "dense", f"lambda={lam:g}", snap)
    return {"results": [r], "report": report.to_dict()}


def _budget_job(cfg: ExperimentConfig, seed: int) -> dict:
    splits = build_task(cfg.task)
    cost = cfg.train.cost
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint)
        untrained = evaluate(init_model(replace(model.config, seed=seed)), splits.val,
                             max_examples=cfg.eval_max_examples)
        snap_more = {"checkpoint": str(cfg.checkpoint)}
    else:
        model, report, untrained = train_model(cfg, splits, seed, 0.0, cost)
        save_checkpoint(model, Path(cfg.output_dir) / "checkpoints" / f"seed{seed}.npz",
                        extra={"lambda": 0.0, "seed": seed})
        snap_more = {"init_checksum": report.init_checksum, "steps_run": report.steps_run}
    ds = _eval_split(cfg, splits)
    n = ds.seq_len
    results, dumps = [], {}
    for k in cfg.sweep_values:
        k = int(k)
        spec = ConstraintSpec.top_k(k)
        snap = _snapshot(cfg, 0.0, seed, cost, untrained_perplexity=untrained.perplexity, **snap_more)
        prov = "dense" if k >= n else "posthoc_mask"
        results.append(_evaluate(cfg, model, ds, spec, seed, 0.0, prov, f"top_k={k}", snap))
    ks = [int(k) for k in cfg.sweep_values]
    sample = ds.inputs[0]
    dumps[f"seed{seed}_k{max(ks)}"] = _attention_sample(model, sample, ConstraintSpec.top_k(max(ks)))
    dumps[f"seed{seed}_k{min(ks)}"] = _attention_sample(model, sample, ConstraintSpec.top_k(min(ks)))
    return {"results": results, "dumps": dumps}


def _lambda_job(cfg: ExperimentConfig, lam: float, seed: int, cost: CostConfig | None = None,
                label: str | None = None, posthoc: bool = True) -> dict:
    splits = build_task(cfg.task)
    cost = cost or cfg.train.cost
    model, report, _ = train_model(cfg, splits, seed, lam, cost)
    ds = _eval_split(cfg, splits)
    snap = _snapshot(cfg, lam, seed, cost, init_checksum=report.init_checksum,
                     steps_run=report.steps_run, best_step=report.best_step)
    prov = "incentive" if lam > 0 else "dense"
    label = label or f"lambda={lam:g}"
    results = [_evaluate(cfg, model, ds, ConstraintSpec(), seed, lam, prov, label, snap)]
    dumps = {f"seed{seed}_{label}": _attention_sample(model, ds.inputs[0], ConstraintSpec())}
    if lam == 0 and posthoc:
        for k in cfg.posthoc_k_values:
            if k >= ds.seq_len:
                continue
            results.append(_evaluate(cfg, model, ds, ConstraintSpec.top_k(int(k)), seed, 0.0,
                                     "posthoc_mask", f"posthoc top_k={int(k)}", snap))
    return {"results": results, "dumps": dumps}


def _run_jobs(fn: Callable, args: Sequence[tuple], workers: int) -> list[dict]:
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def _collect(outs: list[dict]) -> tuple[list[RunResult], dict]:
    results, dumps = [], {}
    for o in outs:
        results += o["results"]
        dumps.update(o.get("dumps", {}))
    return results, dumps


# ---------------------------------------------------------------------------
# Public protocols
# ---------------------------------------------------------------------------


def run_single(cfg: ExperimentConfig, workers: int = 1) -> ExperimentOutput:
    outs = _run_jobs(_single_job, [(cfg, s) for s in cfg.seeds], workers)
    results, _ = _collect(outs)
    return ExperimentOutput(results, extra={"train_reports": [o["report"] for o in outs]})


def run_budget_sweep(cfg: ExperimentConfig, workers: int = 1) -> ExperimentOutput:
    """Evaluate one trained lambda=0 model per seed under each top-k budget, no retraining."""
    if cfg.checkpoint and not Path(cfg.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    outs = _run_jobs(_budget_job, [(cfg, s) for s in cfg.seeds], workers)
    results, dumps = _collect(outs)
    return ExperimentOutput(results, dumps=dumps)


def match_posthoc(results: Sequence[RunResult]) -> list[dict]:
    """For each incentive point, the same-seed post-hoc point with nearest effective FLOPs."""
    matches = []
    for r in results:
        if r.provenance != "incentive":
            continue
        pool = [p for p in results if p.provenance == "posthoc_mask" and p.seed == r.seed]
        if not pool:
            continue
        best = min(pool, key=lambda p: (abs(p.metrics.flops_effective - r.metrics.flops_effective),
                                        p.constraint["budget_k"]))
        matches.append({
            "lambda": r.lambda_incentive,
            "seed": r.seed,
            "incentive_flops": r.metrics.flops_effective,
            "incentive_accuracy": r.accuracy,
            "matched_k": best.constraint["budget_k"],
            "posthoc_flops": best.metrics.flops_effective,
            "posthoc_accuracy": best.accuracy,
        })
    return matches


def pareto_points(results: Sequence[RunResult]) -> list[ParetoPoint]:
    return [ParetoPoint(float(r.metrics.flops_effective), float(r.accuracy), r.provenance, r.label, r.seed)
            for r in results]


def run_lambda_sweep(cfg: ExperimentConfig, workers: int = 1) -> ExperimentOutput:
    """Train one model per (lambda, seed), add the post-hoc top-k series, build the front."""
    lams = list(cfg.sweep_values)
    # the lambda=0 model is always trained: it is the dense point and the post-hoc source
    if 0.0 not in lams:
        lams = [0.0] + lams
    args = [(cfg, float(lam), s) for s in cfg.seeds for lam in lams]
    results, dumps = _collect(_run_jobs(_lambda_job, args, workers))
    front = compute_pareto_front(pareto_points(results))
    extra = {
        "flops_matching": match_posthoc(results),
        "posthoc_series": "top-k masking of the lambda=0 model (stand-in for iterative pruning)",
    }
    return ExperimentOutput(results, front, extra, dumps)


def run_ablation(cfg: ExperimentConfig, workers: int = 1) -> ExperimentOutput:
    """Three runs at one lambda: cost on both terms, attention only, FFN only."""
    lam = float(cfg.sweep_values[0])
    base = cfg.train.cost
    args = []
    for s in cfg.seeds:
        for arm, (a, b) in ABLATION_ARMS.items():
            cost = replace(base, alpha=base.alpha * a, beta=base.beta * b)
            args.append((cfg, lam, s, cost, f"ablation {arm}", False))
    results, dumps = _collect(_run_jobs(_lambda_job, args, workers))
    return ExperimentOutput(results, dumps=dumps)


PROTOCOLS = {
    "single_run": run_single,
    "budget_sweep": run_budget_sweep,
    "lambda_sweep": run_lambda_sweep,
    "ablation": run_ablation,
}


def run_experiment(cfg: ExperimentConfig, workers: int = 1, charts: bool = True) -> ExperimentOutput:
    """Run the configured protocol and write reports (and charts) to ``cfg.output_dir``."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.json")
    output = PROTOCOLS[cfg.kind](cfg, workers)
    emit_report(output.results, output.front, out_dir, cfg.kind, output.extra)
    if output.dumps:
        save_attention_dumps(output.dumps, out_dir / "attention_dumps.json")
    if charts and output.results:
        emit_charts(output.results, output.front, out_dir, output.dumps)
    return output
