"""Incentive-driven training loop, AdamW with warmup/decay, and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from compecon import autodiff as ad
from compecon.constraints import ConstraintSpec
from compecon.economics import (
    CostConfig,
    EconomicMetrics,
    RunResult,
    aggregate_metrics,
    computational_cost,
    incentive_loss,
)
from compecon.model import TransformerModel, forward
from compecon.tasks import IGNORE, Dataset

log = logging.getLogger(__name__)

BETA1, BETA2, EPS, WEIGHT_DECAY = 0.9, 0.999, 1e-8, 0.01


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 4
    warmup_fraction: float = 0.1
    lambda_incentive: float = 0.0
    cost: CostConfig = field(default_factory=CostConfig)
    early_stop_patience: int = 3
    seed: int = 0
    eval_interval: int = 100
    optimizer: str = "adamw"
    weight_decay: float = WEIGHT_DECAY
    grad_clip: float = 1.0
    eval_max_examples: int = 200

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.lambda_incentive < 0:
            raise ValueError(f"lambda_incentive must be >= 0, got {self.lambda_incentive}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_interval < 1:
            raise ValueError("batch_size, max_epochs and eval_interval must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup to ``peak`` at the warmup end, then linear decay to 0.

    ``step`` counts completed updates starting at 1.
    """
    warm = max(1, math.ceil(warmup_fraction * total_steps)) if warmup_fraction > 0 else 0
    if warm and step <= warm:
        return peak * step / warm
    if total_steps <= warm:
        return peak
    return peak * max(0.0, (total_steps - step) / (total_steps - warm))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = WEIGHT_DECAY,
    betas: tuple[float, float] = (BETA1, BETA2),
    eps: float = EPS,
) -> None:
    """One AdamW update in place: decoupled decay, bias-corrected moments."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    """Plain gradient descent, the literal update of the training loop."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            p -= lr * g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def task_loss(model: TransformerModel, logits: ad.Tensor, targets: np.ndarray, kind: str) -> ad.Tensor:
    """Cross-entropy over targeted positions (LM) or final-token labels (classify)."""
    v = model.config.output_dim
    if kind == "classify":
        b, n = logits.shape[0], logits.shape[1]
        flat = ad.reshape(logits, (b * n, v))
        final = ad.take_rows(flat, np.arange(b) * n + (n - 1))
        return ad.cross_entropy(final, targets)
    flat_t = targets.reshape(-1)
    keep = np.flatnonzero(flat_t != IGNORE)
    flat = ad.reshape(logits, (-1, v))
    if keep.size != flat_t.size:
        flat = ad.take_rows(flat, keep)
    return ad.cross_entropy(flat, flat_t[keep])


@dataclass
class StepLosses:
    task: ad.Tensor
    cost: ad.Tensor | None
    total: ad.Tensor


def compute_losses(
    model: TransformerModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    kind: str,
    lam: float,
    cost_cfg: CostConfig,
    include_cost: bool = True,
) -> StepLosses:
    """Forward with trace, task loss, cost, and their incentive-weighted sum."""
    logits, trace = forward(model, inputs, trace=True)
    lt = task_loss(model, logits, targets, kind)
    if not include_cost:
        return StepLosses(lt, None, lt)
    cost = computational_cost(trace, cost_cfg)
    return StepLosses(lt, cost, incentive_loss(lt, cost, lam))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _subset(ds: Dataset, limit: int | None) -> Dataset:
    if limit is None or len(ds) <= limit:
        return ds
    return Dataset(
        ds.inputs[:limit], ds.targets[:limit], vocab=ds.vocab, split=ds.split,
        kind=ds.kind, vocab_size=ds.vocab_size, indices=ds.indices[:limit],
    )


def measure_latency_ms(model: TransformerModel, tokens, constraint: ConstraintSpec,
                       repeats: int = 30, warmup: int = 5) -> float:
    """Median wall-clock time of single-sequence forwards; informational only."""
    with ad.no_grad():
        for _ in range(warmup):
            forward(model, tokens, constraint)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward(model, tokens, constraint)
            times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def evaluate(
    model: TransformerModel,
    dataset: Dataset,
    constraint: ConstraintSpec | None = None,
    batch_size: int = 50,
    max_examples: int | None = None,
    latency: bool = False,
    label: str = "",
    seed: int = 0,
    lambda_incentive: float = 0.0,
    provenance: str = "dense",
) -> RunResult:
    """Task metrics and aggregated economic metrics without touching parameters."""
    spec = constraint or ConstraintSpec()
    ds = _subset(dataset, max_examples)
    nll_sum, count, correct = 0.0, 0, 0
    traces = []
    with ad.no_grad():
        for x, y in ds.batches(batch_size):
            logits, tr = forward(model, x, spec, trace=True)
            traces.append(tr)
            nll, n_t, n_c = _batch_scores(logits.data, y, ds.kind)
            nll_sum += nll
            count += n_t
            correct += n_c
    mean_nll = nll_sum / max(count, 1)
    metrics = aggregate_metrics(traces, model.config)
    lat = measure_latency_ms(model, ds.inputs[0], spec) if latency else 0.0
    return RunResult(
        label=label or spec.label(),
        seed=seed,
        lambda_incentive=lambda_incentive,
        constraint=spec.to_dict(),
        loss=mean_nll,
        perplexity=math.exp(mean_nll),
        accuracy=correct / max(count, 1),
        metrics=metrics,
        latency_ms=lat,
        provenance=provenance,
    )


def _batch_scores(logits: np.ndarray, targets: np.ndarray, kind: str) -> tuple[float, int, int]:
    if kind == "classify":
        rows = logits[:, -1, :]
        t = targets
    else:
        flat_t = targets.reshape(-1)
        keep = flat_t != IGNORE
        rows = logits.reshape(-1, logits.shape[-1])[keep]
        t = flat_t[keep]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(len(t)), t].sum()
    correct = int((rows.argmax(axis=-1) == t).sum())
    return float(nll), len(t), correct


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class HistoryEntry:
    step: int
    task_loss: float
    cost: float
    total_loss: float
    lr: float
    val_metric: float | None = None
    metrics: EconomicMetrics | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.metrics is not None:
            d["metrics"] = self.metrics.to_dict()
        return d


@dataclass
class TrainReport:
    history: list[HistoryEntry]
    best_step: int
    best_val_metric: float
    stopped_early: bool
    steps_run: int
    final: RunResult | None = None
    init_checksum: str = ""

    def to_dict(self) -> dict:
        return {
            "history": [h.to_dict() for h in self.history],
            "best_step": self.best_step,
            "best_val_metric": self.best_val_metric,
            "stopped_early": self.stopped_early,
            "steps_run": self.steps_run,
            "final": self.final.to_dict() if self.final else None,
            "init_checksum": self.init_checksum,
        }


@dataclass
class EarlyStopping:
    """Patience counter on a higher-is-better validation metric.

    A tie with the best value counts as an improvement: a saturated metric
    (accuracy stuck at 1.0 while the incentive keeps reshaping activations)
    is not stagnation, and the newer parameters become the best checkpoint.
    """

    patience: int
    best: float = -math.inf
    bad_evals: int = 0

    def update(self, metric: float) -> bool:
        """Record one evaluation; returns True when it is the new best."""
        if metric >= self.best:
            self.best = metric
            self.bad_evals = 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience


def val_metric(result: RunResult, kind: str, has_ignored: bool) -> float:
    """Higher is better: accuracy for recall/classification, -perplexity for LM."""
    if kind == "classify" or has_ignored:
        return result.accuracy
    return -result.perplexity


def train(
    model: TransformerModel,
    train_set: Dataset,
    val_set: Dataset | None,
    config: TrainConfig,
    include_cost: bool = True,
) -> TrainReport:
    """Minimise ``task + lambda * cost`` over the training set.

    Each step: traced forward, task loss, computational cost, total loss,
    backward, clipped optimizer update.  The model ends at the parameters of
    its best validation evaluation.  ``include_cost=False`` removes the cost
    term from the graph entirely.
    """
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if train_set.vocab_size > model.config.vocab_size:
        raise TrainingError(
            f"dataset vocab {train_set.vocab_size} exceeds model vocab {model.config.vocab_size}"
        )
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total = steps_per_epoch * config.max_epochs
    state = AdamWState()
    params = {k: t.data for k, t in model.params.items()}
    kind = train_set.kind
    has_ignored = kind != "classify" and bool((train_set.targets == IGNORE).any())
    lam = config.lambda_incentive

    history: list[HistoryEntry] = []
    stopper = EarlyStopping(config.early_stop_patience)
    best_step, best_state = 0, model.state()
    stopped, step = False, 0
    init_sum = model.checksum()

    for epoch in range(config.max_epochs):
        for x, y in train_set.batches(config.batch_size, rng):
            step += 1
            model.zero_grad()
            try:
                with ad.Tape() as tape:
                    losses = compute_losses(model, x, y, kind, lam, config.cost, include_cost)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite forward pass at step {step} (epoch {epoch}): {exc}") from exc
            total_v = losses.total.item()
            if not math.isfinite(total_v):
                raise TrainingError(f"non-finite loss {total_v} at step {step} (epoch {epoch})")
            with np.errstate(invalid="ignore", over="ignore"):
                tape.backward(losses.total)
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            norm = clip_grad_norm(grads, config.grad_clip)
            if not math.isfinite(norm):
                raise TrainingError(f"non-finite gradient norm at step {step} (epoch {epoch})")
            lr = lr_at(step, total, config.learning_rate, config.warmup_fraction)
            if config.optimizer == "adamw":
                optimizer_step(params, grads, state, lr, config.weight_decay)
            else:
                sgd_step(params, grads, lr)

            if step % config.eval_interval == 0 or step == total:
                entry = HistoryEntry(
                    step=step,
                    task_loss=losses.task.item(),
                    cost=losses.cost.item() if losses.cost is not None else 0.0,
                    total_loss=total_v,
                    lr=lr,
                )
                if val_set is not None and len(val_set):
                    res = evaluate(model, val_set, max_examples=config.eval_max_examples)
                    entry.val_metric = val_metric(res, kind, has_ignored)
                    entry.metrics = res.metrics
                    if stopper.update(entry.val_metric):
                        best_step, best_state = step, model.state()
                history.append(entry)
                log.debug("step %d task %.4f cost %.4f val %s", step, entry.task_loss, entry.cost, entry.val_metric)
                if stopper.should_stop:
                    stopped = True
                    break
        if stopped:
            break

    if val_set is not None and len(val_set) and stopper.best > -math.inf:
        model.load_state(best_state)
    else:
        best_step = step
    return TrainReport(
        history=history,
        best_step=best_step,
        best_val_metric=stopper.best,
        stopped_early=stopped,
        steps_run=step,
        init_checksum=init_sum,
    )
