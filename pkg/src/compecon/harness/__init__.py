"""Experiment orchestration: configs, sweeps, Pareto fronts, reports and charts."""

from compecon.harness.config import ExperimentConfig, TaskSpec, config_from_dict, load_config
from compecon.harness.pareto import ParetoPoint, compute_pareto_front
from compecon.harness.report import emit_report, load_results
from compecon.harness.charts import emit_charts
from compecon.harness.sweeps import (
    run_ablation,
    run_budget_sweep,
    run_experiment,
    run_lambda_sweep,
    run_single,
)

__all__ = [
    "ExperimentConfig", "TaskSpec", "config_from_dict", "load_config", "ParetoPoint",
    "compute_pareto_front", "emit_report", "load_results", "emit_charts", "run_ablation",
    "run_budget_sweep", "run_experiment", "run_lambda_sweep", "run_single",
]
