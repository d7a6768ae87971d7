"""Static, self-contained SVG charts.

Heatmap ramp: attention probability ``p`` in [0, 1] is drawn as the gray
``rgb(g, g, g)`` with ``g = round(255 * (1 - p))``; white is 0, black is 1.
"""

from __future__ import annotations

import json
import math
import re
from collections import defaultdict
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from compecon.economics import RunResult
from compecon.harness.pareto import ParetoPoint

WIDTH, HEIGHT = 720, 440
MARGIN = dict(left=80, right=170, top=50, bottom=70)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
PROVENANCE_COLORS = {"incentive": "#d62728", "posthoc_mask": "#1f77b4", "dense": "#000000"}


def gray_hex(p: float) -> str:
    g = int(round(255 * (1.0 - min(max(float(p), 0.0), 1.0))))
    return f"#{g:02x}{g:02x}{g:02x}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt_tick(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-2):
        return f"{v:.2e}"
    return f"{v:.3g}"


class _Canvas:
    def __init__(self, title: str, x_label: str, y_label: str, xr, yr, log_x: bool = False):
        self.parts: list[str] = []
        self.log_x = log_x
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.left, self.top = MARGIN["left"], MARGIN["top"]
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        self.parts.append(
            f'<text x="{WIDTH / 2:.1f}" y="28" text-anchor="middle" font-size="16">{escape(title)}</text>'
        )
        self.parts.append(
            f'<rect x="{self.left}" y="{self.top}" width="{self.pw}" height="{self.ph}" '
            'fill="none" stroke="#333"/>'
        )
        self.parts.append(
            f'<text x="{self.left + self.pw / 2:.1f}" y="{HEIGHT - 20}" text-anchor="middle" '
            f'font-size="13">{escape(x_label)}</text>'
        )
        cy = self.top + self.ph / 2
        self.parts.append(
            f'<text x="20" y="{cy:.1f}" text-anchor="middle" font-size="13" '
            f'transform="rotate(-90 20 {cy:.1f})">{escape(y_label)}</text>'
        )
        self._axes()
        self.legend_y = self.top + 10

    def sx(self, x: float) -> float:
        if self.log_x:
            x, lo, hi = math.log10(x), math.log10(self.x0), math.log10(self.x1)
        else:
            lo, hi = self.x0, self.x1
        return self.left + (x - lo) / (hi - lo) * self.pw

    def sy(self, y: float) -> float:
        return self.top + self.ph - (y - self.y0) / (self.y1 - self.y0) * self.ph

    def _axes(self):
        if self.log_x:
            lo, hi = math.floor(math.log10(self.x0)), math.ceil(math.log10(self.x1))
            xt = [10.0**e for e in range(lo, hi + 1) if self.x0 <= 10.0**e <= self.x1]
        else:
            xt = _ticks(self.x0, self.x1)
        for x in xt:
            px = self.sx(x)
            self.parts.append(
                f'<line x1="{px:.1f}" y1="{self.top + self.ph}" x2="{px:.1f}" y2="{self.top + self.ph + 5}" stroke="#333"/>'
            )
            self.parts.append(
                f'<text x="{px:.1f}" y="{self.top + self.ph + 20}" text-anchor="middle" font-size="11">{_fmt_tick(x)}</text>'
            )
        for y in _ticks(self.y0, self.y1):
            py = self.sy(y)
            self.parts.append(
                f'<line x1="{self.left - 5}" y1="{py:.1f}" x2="{self.left}" y2="{py:.1f}" stroke="#333"/>'
            )
            self.parts.append(
                f'<text x="{self.left - 8}" y="{py + 4:.1f}" text-anchor="end" font-size="11">{_fmt_tick(y)}</text>'
            )

    def polyline(self, pts, color: str):
        if len(pts) > 1:
            coords = " ".join(f"{self.sx(x):.1f},{self.sy(y):.1f}" for x, y in pts)
            self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')

    def markers(self, pts, color: str, shape: str = "circle"):
        for x, y in pts:
            px, py = self.sx(x), self.sy(y)
            if shape == "square":
                self.parts.append(
                    f'<rect class="marker" x="{px - 4:.1f}" y="{py - 4:.1f}" width="8" height="8" fill="{color}"/>'
                )
            else:
                self.parts.append(f'<circle class="marker" cx="{px:.1f}" cy="{py:.1f}" r="4" fill="{color}"/>')

    def legend(self, name: str, color: str):
        x = self.left + self.pw + 15
        self.parts.append(f'<rect x="{x}" y="{self.legend_y - 9}" width="12" height="12" fill="{color}"/>')
        self.parts.append(f'<text x="{x + 18}" y="{self.legend_y + 1}" font-size="12">{escape(name)}</text>')
        self.legend_y += 20

    def svg(self) -> str:
        return _document(WIDTH, HEIGHT, self.parts)


def _document(w: int, h: int, parts: Sequence[str]) -> str:
    body = "\n".join(parts)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="sans-serif">\n'
        f'<rect width="{w}" height="{h}" fill="#ffffff"/>\n{body}\n</svg>\n'
    )


def _range(vals: Sequence[float], pad: float = 0.05) -> tuple[float, float]:
    lo, hi = min(vals), max(vals)
    span = hi - lo or abs(hi) or 1.0
    return lo - pad * span, hi + pad * span


def line_chart(title, x_label, y_label, series: dict[str, list[tuple[float, float]]], log_x=False) -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    xr = (min(xs), max(xs)) if log_x else _range(xs)
    c = _Canvas(title, x_label, y_label, xr, _range(ys), log_x=log_x)
    for i, (name, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = sorted(pts)
        c.polyline(pts, color)
        c.markers(pts, color)
        c.legend(name, color)
    return c.svg()


def pareto_chart(points: Sequence[ParetoPoint], front: Sequence[ParetoPoint], metric_label: str) -> str:
    xs = [p.flops / 1e6 for p in points] or [0.0]
    ys = [p.metric for p in points] or [0.0]
    c = _Canvas("Accuracy vs effective FLOPs", "effective FLOPs per sequence (MFLOP)", metric_label,
                _range(xs), _range(ys))
    c.polyline([(p.flops / 1e6, p.metric) for p in front], "#999999")
    by_prov = defaultdict(list)
    for p in points:
        by_prov[p.provenance].append((p.flops / 1e6, p.metric))
    for prov in sorted(by_prov):
        color = PROVENANCE_COLORS.get(prov, "#555555")
        c.markers(by_prov[prov], color, "square" if prov == "dense" else "circle")
        c.legend(prov, color)
    return c.svg()


def heatmap_svg(matrix, title: str = "", cell: int = 8) -> str:
    """One ``rect`` per cell, gray level encoding probability 0 to 1."""
    a = np.asarray(matrix, dtype=float)
    n_rows, n_cols = a.shape
    top, left = 40, 50
    w, h = left + n_cols * cell + 20, top + n_rows * cell + 40
    parts = [f'<text x="{w / 2:.1f}" y="22" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for i in range(n_rows):
        for j in range(n_cols):
            parts.append(
                f'<rect class="cell" x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                f'height="{cell}" fill="{gray_hex(a[i, j])}"/>'
            )
    parts.append(
        f'<text x="{left + n_cols * cell / 2:.1f}" y="{h - 12}" text-anchor="middle" font-size="11">'
        "key position (white = 0, black = 1)</text>"
    )
    parts.append(
        f'<text x="16" y="{top + n_rows * cell / 2:.1f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 16 {top + n_rows * cell / 2:.1f})">query position</text>'
    )
    return _document(w, h, parts)


def _mean_by(results, key, value):
    acc = defaultdict(list)
    for r in results:
        acc[key(r)].append(value(r))
    return sorted((k, float(np.mean(v))) for k, v in acc.items())


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def emit_charts(
    results: Sequence[RunResult],
    front: Sequence[ParetoPoint],
    output_dir: str | Path,
    attention_dumps: dict[str, list] | None = None,
) -> list[Path]:
    """Render every chart the results support; returns the written paths."""
    if not results:
        raise ValueError("emit_charts: no results")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    topk = [r for r in results if r.constraint.get("mode") == "top_k"]
    if topk:
        k_of = lambda r: r.constraint["budget_k"]  # noqa: E731
        written.append(_write(out / "accuracy_vs_k.svg", line_chart(
            "Task metric under decreasing attention budget", "budget k (keys per query)", "accuracy (fraction)",
            {"accuracy": _mean_by(topk, k_of, lambda r: r.accuracy)}, log_x=True)))
        written.append(_write(out / "perplexity_vs_k.svg", line_chart(
            "Perplexity under decreasing attention budget", "budget k (keys per query)", "perplexity (exp nats)",
            {"perplexity": _mean_by(topk, k_of, lambda r: r.perplexity)}, log_x=True)))
        written.append(_write(out / "allocation_vs_k.svg", line_chart(
            "Resource allocation metrics vs budget", "budget k (keys per query)", "Gini (unitless) / entropy (bits)",
            {
                "mean Gini": _mean_by(topk, k_of, lambda r: r.metrics.mean_gini),
                "mean entropy (bits)": _mean_by(topk, k_of, lambda r: r.metrics.mean_entropy_bits),
            }, log_x=True)))

    lam = [r for r in results if r.provenance in ("incentive", "dense") and r.constraint.get("mode") == "none"]
    lam_vals = {r.lambda_incentive for r in lam}
    if len(lam_vals) > 1 and any(v > 0 for v in lam_vals):
        floor = min(v for v in lam_vals if v > 0) / 10
        x_of = lambda r: r.lambda_incentive if r.lambda_incentive > 0 else floor  # noqa: E731
        written.append(_write(out / "sparsity_vs_lambda.svg", line_chart(
            f"FFN sparsity vs incentive weight (lambda=0 drawn at {floor:g})", "incentive weight lambda",
            "fraction of FFN activations <= 1e-3",
            {"FFN sparsity": _mean_by(lam, x_of, lambda r: r.metrics.ffn_sparsity_fraction)}, log_x=True)))

    if front:
        points = [
            ParetoPoint(r.metrics.flops_effective, r.accuracy, r.provenance, r.label, r.seed) for r in results
        ]
        written.append(_write(out / "pareto.svg", pareto_chart(points, front, "accuracy (fraction)")))

    for name, mat in sorted((attention_dumps or {}).items()):
        written.append(_write(out / f"heatmap_{_slug(name)}.svg", heatmap_svg(mat, f"attention: {name}")))
    return written


def _slug(name: str) -> str:
    """Filesystem-safe version of a dump name (``seed0_lambda=0.001`` -> ``seed0_lambda-0.001``)."""
    return re.sub(r"[^A-Za-z0-9._-]+", "-", name).strip("-")


def save_attention_dumps(dumps: dict[str, list], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({k: np.asarray(v).tolist() for k, v in sorted(dumps.items())}), encoding="utf-8")
    return path


def load_attention_dumps(path: str | Path) -> dict[str, list]:
    path = Path(path)
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))
