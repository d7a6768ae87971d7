"""Inference-time constraints on attention.

Three mechanisms act on the scaled query-key scores of one head:

* ``top_k``: keep the k highest causally-allowed scores per query row.
* ``penalty_literal``: subtract a constant from every score before the
  softmax.  Softmax is shift invariant, so this never changes the attention
  distribution; it is kept as a documented no-op.
* ``penalty_threshold``: drop attention probabilities below a threshold and
  renormalise each row, keeping the row maximum if nothing survives.

None of these receive gradients through the selection itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from compecon import autodiff as ad
from compecon.autodiff import Tensor

MASK_SENTINEL = -1e9
MODES = ("none", "top_k", "penalty_literal", "penalty_threshold")


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSpec:
    mode: str = "none"
    budget_k: int = 0
    lambda_sparse: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConstraintError(f"unknown constraint mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "top_k" and self.budget_k < 1:
            raise ConstraintError(f"top_k requires budget_k >= 1, got {self.budget_k}")
        if self.mode.startswith("penalty") and self.lambda_sparse < 0:
            raise ConstraintError(f"lambda_sparse must be >= 0, got {self.lambda_sparse}")
        if self.mode == "penalty_threshold" and self.lambda_sparse >= 1:
            raise ConstraintError(
                f"penalty_threshold interprets lambda_sparse as a probability; got {self.lambda_sparse}"
            )

    @classmethod
    def none(cls) -> "ConstraintSpec":
        return cls()

    @classmethod
    def top_k(cls, k: int) -> "ConstraintSpec":
        return cls(mode="top_k", budget_k=k)

    def to_dict(self) -> dict:
        return asdict(self)

    def label(self) -> str:
        if self.mode == "top_k":
            return f"top_k={self.budget_k}"
        if self.mode.startswith("penalty"):
            return f"{self.mode}={self.lambda_sparse:g}"
        return "none"


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def top_k_allowed(scores: np.ndarray, k: int, allowed: np.ndarray) -> np.ndarray:
    """Boolean mask of the k largest allowed scores in each row.

    Ties go to the lower key index.  Rows with at most k allowed entries are
    returned unchanged.
    """
    if k < 1:
        raise ConstraintError(f"top-k budget must be >= 1, got {k}")
    allowed = np.broadcast_to(allowed, scores.shape)
    masked = np.where(allowed, scores, -np.inf)
    # stable argsort of the negated scores: descending, lower index first on ties
    order = np.argsort(-masked, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(scores.shape[-1]), axis=-1)
    return allowed & (rank < k)


def top_k_mask(scores: Tensor, k: int, allowed: np.ndarray) -> Tensor:
    """Scores with everything outside the per-row top-k set to the sentinel."""
    keep = top_k_allowed(scores.data, k, allowed)
    return ad.masked_fill(scores, keep, MASK_SENTINEL)


def threshold_allowed(probs: np.ndarray, threshold: float, allowed: np.ndarray) -> np.ndarray:
    """Entries with probability >= threshold; falls back to the row argmax."""
    allowed = np.broadcast_to(allowed, probs.shape)
    keep = allowed & (probs >= threshold)
    empty = ~keep.any(axis=-1)
    if empty.any():
        arg = np.argmax(np.where(allowed, probs, -np.inf), axis=-1)
        onehot = np.arange(probs.shape[-1]) == arg[..., None]
        keep = np.where(empty[..., None], onehot, keep)
    return keep


def _none(scores: Tensor, allowed: np.ndarray, spec: ConstraintSpec) -> Tensor:
    return ad.softmax_rows(scores, allowed)


def _top_k(scores: Tensor, allowed: np.ndarray, spec: ConstraintSpec) -> Tensor:
    keep = top_k_allowed(scores.data, spec.budget_k, allowed)
    masked = ad.masked_fill(scores, keep, MASK_SENTINEL)
    # masked entries are snapped to exact zero by restricting the softmax support
    return ad.softmax_rows(masked, keep)


def _literal(scores: Tensor, allowed: np.ndarray, spec: ConstraintSpec) -> Tensor:
    shifted = ad.add(scores, Tensor(np.full(scores.shape, -spec.lambda_sparse, dtype=scores.dtype)))
    return ad.softmax_rows(shifted, allowed)


def _threshold(scores: Tensor, allowed: np.ndarray, spec: ConstraintSpec) -> Tensor:
    probs = ad.softmax_rows(scores, allowed)
    if spec.lambda_sparse == 0:
        return probs
    keep = threshold_allowed(probs.data, spec.lambda_sparse, allowed)
    # softmax over the surviving subset equals zeroing and renormalising
    return ad.softmax_rows(scores, keep)


_DISPATCH: dict[str, Callable[[Tensor, np.ndarray, ConstraintSpec], Tensor]] = {
    "none": _none,
    "top_k": _top_k,
    "penalty_literal": _literal,
    "penalty_threshold": _threshold,
}


def apply_constraint(spec: ConstraintSpec, scores: Tensor, allowed: np.ndarray) -> Tensor:
    """Attention probabilities for scaled ``scores`` under ``spec``.

    ``allowed`` marks causally valid positions and broadcasts against
    ``scores``; the constraint only ever removes positions from it.
    """
    return _DISPATCH[spec.mode](scores, allowed, spec)


def scaled_scores(q: Tensor, k: Tensor) -> Tensor:
    dk = q.shape[-1]
    return ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))


def attention(
    q: Tensor, k: Tensor, v: Tensor, spec: ConstraintSpec | None = None, allowed: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Single- or multi-head attention; returns ``(output, attention matrix)``."""
    spec = spec or ConstraintSpec()
    scores = scaled_scores(q, k)
    if allowed is None:
        allowed = np.ones(scores.shape[-2:], dtype=bool)
    probs = apply_constraint(spec, scores, allowed)
    return ad.matmul(probs, v), probs


def penalized_attention_literal(q: Tensor, k: Tensor, v: Tensor, lambda_sparse: float, allowed=None):
    """Subtract ``lambda_sparse`` from every score, then attend."""
    return attention(q, k, v, ConstraintSpec("penalty_literal", lambda_sparse=lambda_sparse), allowed)


def penalized_attention_threshold(q: Tensor, k: Tensor, v: Tensor, lambda_sparse: float, allowed=None):
    """Drop probabilities below ``lambda_sparse`` and renormalise rows, then attend."""
    return attention(q, k, v, ConstraintSpec("penalty_threshold", lambda_sparse=lambda_sparse), allowed)


def mean_row_support(probs: np.ndarray) -> float:
    return float((probs > 0).sum(axis=-1).mean())


def calibrate_threshold(
    support_at: Callable[[float], float], budget: float, max_iter: int = 20, tol: float = 1.0
) -> float:
    """Bisection over the threshold so that mean row support lands within ``budget +- tol``.

    ``support_at(lam)`` must return the mean number of nonzero attention
    entries per row at threshold ``lam``; it is non-increasing in ``lam``.
    Returns the best threshold seen when the tolerance is never met.
    """
    lo, hi = 0.0, 1.0 - 1e-12
    best, best_err = 0.0, abs(support_at(0.0) - budget)
    if best_err <= tol:
        return best
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        s = support_at(mid)
        err = abs(s - budget)
        if err < best_err:
            best, best_err = mid, err
        if err <= tol:
            break
        if s > budget:
            lo = mid
        else:
            hi = mid
    return best
