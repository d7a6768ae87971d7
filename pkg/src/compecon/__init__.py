"""Attention budgets, compute-taxed training, and allocation metrics for small transformers."""

from compecon.autodiff import Tape, Tensor, backward, no_grad
from compecon.constraints import ConstraintSpec, apply_constraint, top_k_mask
from compecon.economics import (
    CostConfig,
    EconomicMetrics,
    RunResult,
    aggregate_metrics,
    attention_entropy,
    computational_cost,
    flops_estimate,
    gini,
    incentive_loss,
    sparsity_fraction,
)
from compecon.model import ActivationTrace, ModelConfig, TransformerModel, count_params, forward, init_model
from compecon.training import TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "no_grad",
    "ConstraintSpec", "apply_constraint", "top_k_mask",
    "CostConfig", "EconomicMetrics", "RunResult", "aggregate_metrics", "attention_entropy",
    "computational_cost", "flops_estimate", "gini", "incentive_loss", "sparsity_fraction",
    "ActivationTrace", "ModelConfig", "TransformerModel", "count_params", "forward", "init_model",
    "TrainConfig", "TrainReport", "evaluate", "train",
]
