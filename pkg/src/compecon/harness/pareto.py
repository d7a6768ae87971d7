"""Non-dominated subsets under (minimise FLOPs, maximise task metric)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

PROVENANCES = ("incentive", "posthoc_mask", "dense")


@dataclass(frozen=True)
class ParetoPoint:
    flops: float
    metric: float
    provenance: str = "dense"
    label: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """``a`` is no worse on both axes and strictly better on one."""
    return a.flops <= b.flops and a.metric >= b.metric and (a.flops < b.flops or a.metric > b.metric)


def compute_pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points ordered by FLOPs ascending (input order among ties).

    Sort by (flops asc, metric desc); a point survives when its metric beats
    everything of strictly lower FLOPs and it is not beaten by a same-FLOPs
    point with a higher metric.
    """
    if not points:
        raise ValueError("compute_pareto_front: no points")
    order = sorted(range(len(points)), key=lambda i: (points[i].flops, -points[i].metric, i))
    front_idx = []
    best_prev = float("-inf")  # best metric among strictly smaller flops
    i = 0
    while i < len(order):
        j = i
        flops = points[order[i]].flops
        while j < len(order) and points[order[j]].flops == flops:
            j += 1
        group = order[i:j]
        top = points[group[0]].metric
        if top > best_prev:
            front_idx += [g for g in group if points[g].metric == top]
            best_prev = top
        i = j
    front_idx.sort(key=lambda g: (points[g].flops, g))
    return [points[g] for g in front_idx]
