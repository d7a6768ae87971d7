"""Cost, allocation and efficiency metrics for traced forward passes.

FLOP convention (see ``docs/flops.md``): a multiply-accumulate is 2 FLOPs;
every elementwise pass (layer norm, softmax, score scaling, bias add,
residual add, ReLU, embedding add) is 1 FLOP per element; the embedding
lookup itself is free.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from compecon import autodiff as ad
from compecon.autodiff import Tensor
from compecon.model import ActivationTrace, ModelConfig

SPARSITY_THRESHOLD = 1e-3
ATTENTION_COST_MODES = ("literal_l1", "entropy_surrogate")


class CostConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostConfig:
    alpha: float = 1.0
    beta: float = 1.0
    attention_cost_mode: str = "entropy_surrogate"
    normalize_by_tokens: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise CostConfigError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.attention_cost_mode not in ATTENTION_COST_MODES:
            raise CostConfigError(f"unknown attention_cost_mode {self.attention_cost_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EconomicMetrics:
    mean_gini: float = 0.0
    mean_entropy_bits: float = 0.0
    flops_dense: int = 0
    flops_effective: int = 0
    ffn_sparsity_fraction: float = 0.0
    attention_support_fraction: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    """One experiment point: config snapshot, task metrics, allocation metrics."""

    label: str
    seed: int
    lambda_incentive: float
    constraint: dict
    loss: float
    perplexity: float
    accuracy: float
    metrics: EconomicMetrics
    latency_ms: float = 0.0
    provenance: str = "dense"
    config: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["metrics"] = EconomicMetrics(**d["metrics"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Differentiable cost and incentive loss
# ---------------------------------------------------------------------------


def computational_cost(trace: ActivationTrace, cost: CostConfig) -> Tensor:
    """Attention term plus FFN activation L1, weighted by ``alpha`` and ``beta``.

    In ``literal_l1`` mode the attention term is the L1 mass of the
    post-softmax matrices, which is constant (one per attended row).  In
    ``entropy_surrogate`` mode it is the summed natural-log row entropy.
    """
    if not trace.attention and not trace.ffn_post:
        raise ValueError("computational_cost: empty trace")
    terms: list[Tensor] = []
    if cost.alpha:
        for a in trace.attention:
            if cost.attention_cost_mode == "literal_l1":
                t = ad.l1_norm(a)
            else:
                t = ad.scale(ad.xlogx_sum(a), -1.0)
            terms.append(ad.scale(t, cost.alpha))
    if cost.beta:
        for post in trace.ffn_post:
            terms.append(ad.scale(ad.l1_norm(post), cost.beta))
    ref = (trace.attention or trace.ffn_post)[0]
    total = Tensor(np.zeros((), dtype=ref.dtype))
    for t in terms:
        total = ad.add(total, t)
    if cost.normalize_by_tokens:
        total = ad.scale(total, 1.0 / (trace.batch_size * trace.seq_len))
    return total


def incentive_loss(task_loss: Tensor, cost: Tensor, lam: float) -> Tensor:
    """``task_loss + lam * cost``."""
    if lam < 0:
        raise CostConfigError(f"incentive weight must be >= 0, got {lam}")
    if lam == 0:
        return task_loss
    return ad.add(task_loss, ad.scale(cost, lam))


# ---------------------------------------------------------------------------
# Allocation metrics
# ---------------------------------------------------------------------------


def gini(weights: Sequence[float]) -> float:
    """Gini coefficient of nonnegative weights via the sorted-rank formula.

    Equivalent to ``sum_ij |w_i - w_j| / (2 N sum_i w_i)``.  An all-zero
    input returns 0.
    """
    w = np.sort(np.asarray(weights, dtype=np.float64).ravel())
    n = w.size
    if n == 0:
        raise ValueError("gini: empty input")
    if (w < 0).any():
        raise ValueError("gini: weights must be nonnegative")
    total = w.sum()
    if total == 0:
        return 0.0
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    # the rank weights sum to zero, so shifting by the minimum leaves the
    # numerator unchanged while making uniform input exactly zero
    return float(max((ranks * (w - w[0])).sum() / (n * total), 0.0))


def gini_rows(rows: np.ndarray) -> np.ndarray:
    """Row-wise :func:`gini` for a 2-D array of nonnegative rows."""
    w = np.sort(np.asarray(rows, dtype=np.float64), axis=-1)
    n = w.shape[-1]
    total = w.sum(axis=-1)
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    num = ((w - w[..., :1]) * ranks).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(total > 0, num / (n * np.where(total > 0, total, 1.0)), 0.0)
    return np.maximum(g, 0.0)


def attention_entropy(weights: Sequence[float], tol: float = 1e-6) -> float:
    """Shannon entropy in bits with ``0 log 0 = 0``."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if (w < 0).any():
        raise ValueError("attention_entropy: negative weight")
    s = w.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"attention_entropy: weights sum to {s}, not 1")
    nz = w[w > 0]
    if nz.min() == nz.max():
        # uniform over its support: exact, where the sum would carry rounding
        return math.log2(nz.size)
    return float(-(nz * np.log2(nz)).sum())


def entropy_rows_bits(rows: np.ndarray) -> np.ndarray:
    p = np.asarray(rows, dtype=np.float64)
    pos = p > 0
    lp = np.log2(np.where(pos, p, 1.0))
    h = -(p * lp).sum(axis=-1)
    # rows uniform over their support get the exact value log2(support)
    count = pos.sum(axis=-1)
    hi = np.where(pos, p, -np.inf).max(axis=-1)
    lo = np.where(pos, p, np.inf).min(axis=-1)
    flat = (count > 0) & (hi == lo)
    return np.where(flat, np.log2(np.maximum(count, 1)), h)


def sparsity_fraction(trace: ActivationTrace, threshold: float = SPARSITY_THRESHOLD) -> float:
    """Fraction of post-ReLU FFN activations at or below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    total = sum(p.data.size for p in trace.ffn_post)
    if total == 0:
        return 0.0
    quiet = sum(int((p.data <= threshold).sum()) for p in trace.ffn_post)
    return quiet / total


def attention_support_fraction(trace: ActivationTrace) -> float:
    total = sum(a.data.size for a in trace.attention)
    if total == 0:
        return 0.0
    return sum(int((a.data > 0).sum()) for a in trace.attention) / total


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def flops_breakdown(config: ModelConfig, n: int) -> dict[str, int]:
    """Dense FLOPs for one sequence of length ``n``, per named term.

    Per-layer terms are for a single layer; multiply by ``num_layers``.
    """
    d, f, h, v = config.model_dim, config.ffn_dim, config.num_heads, config.output_dim
    return {
        "embed_add": n * d,
        "qkv_proj": 3 * 2 * n * d * d,
        "scores": 2 * n * n * d,
        "score_scale": h * n * n,
        "softmax": h * n * n,
        "attn_value": 2 * n * n * d,
        "out_proj": 2 * n * d * d,
        "residual_1": n * d,
        "ln_1": n * d,
        "ffn_1": 2 * n * d * f,
        "ffn_1_bias": n * f,
        "relu": n * f,
        "ffn_2": 2 * n * f * d,
        "ffn_2_bias": n * d,
        "residual_2": n * d,
        "ln_2": n * d,
        "head": 2 * n * d * v,
    }


_GLOBAL_TERMS = ("embed_add", "head")


def flops_dense(config: ModelConfig, n: int) -> int:
    br = flops_breakdown(config, n)
    per_layer = sum(val for key, val in br.items() if key not in _GLOBAL_TERMS)
    return config.num_layers * per_layer + br["embed_add"] + br["head"]


def flops_estimate(
    config: ModelConfig,
    n: int,
    trace: ActivationTrace | None = None,
    threshold: float = SPARSITY_THRESHOLD,
) -> tuple[int, int]:
    """``(flops_dense, flops_effective)`` for one sequence of length ``n``.

    The effective count replaces the attention-value and second FFN matmul
    terms by what the trace actually needs: ``2 * d_k`` per nonzero attention
    probability and ``2 * d_model`` per FFN activation above ``threshold``.
    A batched trace is averaged over its sequences (rounded to nearest).
    """
    if n > config.max_seq_len:
        raise ValueError(f"n={n} exceeds max_seq_len {config.max_seq_len}")
    dense = flops_dense(config, n)
    if trace is None:
        return dense, dense
    br = flops_breakdown(config, n)
    dk, d = config.key_dim, config.model_dim
    batch = trace.batch_size
    saved = 0
    for layer in range(trace.num_layers):
        nz_attn = int((trace.attention[layer].data > 0).sum())
        active = int((trace.ffn_post[layer].data > threshold).sum())
        saved += batch * (br["attn_value"] + br["ffn_2"]) - (2 * dk * nz_attn + 2 * d * active)
    effective = dense - int(round(saved / batch))
    return dense, min(effective, dense)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def trace_row_stats(trace: ActivationTrace) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gini and entropy (bits) over every attention row of the trace.

    Each query row ``t`` is measured over its causal prefix of ``t + 1``
    positions, the set of tokens it could attend to before any constraint.
    """
    n = trace.seq_len
    ginis, ents = [], []
    for a in trace.attention:
        mats = a.data.reshape(-1, n, n)
        for t in range(n):
            rows = mats[:, t, : t + 1]
            ginis.append(gini_rows(rows))
            ents.append(entropy_rows_bits(rows))
    if not ginis:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(ginis), np.concatenate(ents)


def aggregate_metrics(
    traces: Sequence[ActivationTrace],
    config: ModelConfig,
    threshold: float = SPARSITY_THRESHOLD,
) -> EconomicMetrics:
    """Average allocation and cost metrics over a set of traces.

    Gini and entropy are averaged uniformly over every attention row of every
    head, layer and sequence; FLOPs and sparsity are means over traces.
    """
    if not traces:
        raise ValueError("aggregate_metrics: no traces")
    g_all, e_all = [], []
    dense_l, eff_l, sp_l, sup_l = [], [], [], []
    for tr in traces:
        g, e = trace_row_stats(tr)
        g_all.append(g)
        e_all.append(e)
        dense, eff = flops_estimate(config, tr.seq_len, tr, threshold)
        dense_l.append(dense)
        eff_l.append(eff)
        sp_l.append(sparsity_fraction(tr, threshold))
        sup_l.append(attention_support_fraction(tr))
    g = np.concatenate(g_all)
    e = np.concatenate(e_all)
    return EconomicMetrics(
        mean_gini=float(g.mean()) if g.size else 0.0,
        mean_entropy_bits=float(e.mean()) if e.size else 0.0,
        flops_dense=int(round(float(np.mean(dense_l)))),
        flops_effective=int(round(float(np.mean(eff_l)))),
        ffn_sparsity_fraction=float(np.mean(sp_l)),
        attention_support_fraction=float(np.mean(sup_l)),
    )


def perplexity(mean_nll: float) -> float:
    return math.exp(mean_nll)
