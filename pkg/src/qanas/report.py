"""Static result artifacts: SVG figures and CSV tables from a trial log.

Everything here is a pure function of its inputs, so regenerating from the
same log gives byte-identical files.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .search import ScoreConfig, TrialRecord, iso_accuracy, pareto_front, scalarize

BITS_PER_KB = 8192
W, H = 640, 420
ML, MR, MT, MB = 64, 24, 24, 48
BIT_COLORS = {4: "#d7191c", 5: "#fdae61", 6: "#e6e600", 7: "#a6d96a", 8: "#1a9641"}


def _f(x: float) -> str:
    return f"{x:.2f}"


@dataclass
class PlotSpec:
    x_kb: list[float]
    y: list[float]
    front: list[int]
    iso_levels: list[float]
    seed_point: tuple[float, float] | None = None
    x_range: tuple[float, float] = (0.0, 1.0)
    y_range: tuple[float, float] = (0.0, 1.0)
    iso_lines: list[list[tuple[float, float]]] = field(default_factory=list)


def iso_line(level: float, kb: np.ndarray, cfg: ScoreConfig) -> np.ndarray:
    return iso_accuracy(level, BITS_PER_KB * np.asarray(kb, dtype=float), cfg)


def scatter_spec(
    trials: Sequence[TrialRecord],
    cfg: ScoreConfig,
    seed_point: tuple[int, float] | None = None,
) -> PlotSpec:
    if not trials:
        raise ValueError("empty trial log")
    kb = [t.size_bits / BITS_PER_KB for t in trials]
    acc = [t.quant_accuracy for t in trials]
    front = pareto_front(list(zip(acc, [t.size_bits for t in trials])))
    # recompute under the plotting config so each line passes through its point
    levels = [scalarize(acc[i], trials[i].size_bits, cfg) for i in front]
    all_kb = kb + ([seed_point[0] / BITS_PER_KB] if seed_point else [])
    all_acc = acc + ([seed_point[1]] if seed_point else [])
    lo = math.floor(math.log10(min(all_kb)) * 2) / 2
    hi = math.ceil(math.log10(max(all_kb)) * 2) / 2
    if hi <= lo:
        hi = lo + 0.5
    ylo = max(0.0, math.floor((min(all_acc) - 0.05) * 10) / 10)
    spec = PlotSpec(
        kb,
        acc,
        front,
        levels,
        None if seed_point is None else (seed_point[0] / BITS_PER_KB, seed_point[1]),
        (lo, hi),
        (ylo, 1.0),
    )
    xs = np.logspace(lo, hi, 97)
    for level in levels:
        ys = iso_line(level, xs, cfg)
        spec.iso_lines.append(list(zip(xs.tolist(), ys.tolist())))
    return spec


def _scatter_svg(spec: PlotSpec) -> str:
    (lo, hi), (ylo, yhi) = spec.x_range, spec.y_range
    pw, ph = W - ML - MR, H - MT - MB

    def px(kb):
        return ML + (math.log10(kb) - lo) / (hi - lo) * pw

    def py(a):
        return MT + (yhi - a) / (yhi - ylo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
        f'<clipPath id="plot"><rect x="{ML}" y="{MT}" width="{pw}" height="{ph}"/></clipPath>',
    ]
    d = lo
    while d <= hi + 1e-9:
        x = px(10**d)
        label = f"{10**d:g}"
        out.append(f'<line x1="{_f(x)}" y1="{MT + ph}" x2="{_f(x)}" y2="{MT + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_f(x)}" y="{MT + ph + 16}" text-anchor="middle">{label}</text>')
        d += 0.5
    for k in range(11):
        a = ylo + (yhi - ylo) * k / 10
        y = py(a)
        out.append(f'<line x1="{ML - 4}" y1="{_f(y)}" x2="{ML}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<text x="{ML - 6}" y="{_f(y + 4)}" text-anchor="end">{a * 100:.0f}</text>')
    out.append(f'<text x="{ML + pw / 2}" y="{H - 8}" text-anchor="middle">model size [kB]</text>')
    out.append(
        f'<text x="14" y="{MT + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MT + ph / 2})">task accuracy [%]</text>'
    )
    for line in spec.iso_lines:
        pts = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in line)
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="#888" stroke-dasharray="3,3" '
            f'clip-path="url(#plot)"/>'
        )
    n = len(spec.x_kb)
    for i, (kb, a) in enumerate(zip(spec.x_kb, spec.y)):
        shade = int(40 + 170 * (i / max(n - 1, 1)))
        r = 2.5 + 1.5 * (math.log10(kb) - lo) / (hi - lo)
        out.append(
            f'<circle cx="{_f(px(kb))}" cy="{_f(py(a))}" r="{_f(r)}" '
            f'fill="rgb({shade},{shade},{min(255, shade + 40)})"/>'
        )
    for i in spec.front:
        out.append(
            f'<circle cx="{_f(px(spec.x_kb[i]))}" cy="{_f(py(spec.y[i]))}" r="5" '
            f'fill="none" stroke="red" stroke-width="1.5"/>'
        )
    if spec.seed_point is not None:
        x, y = px(spec.seed_point[0]), py(spec.seed_point[1])
        out.append(
            f'<path d="M{_f(x - 5)},{_f(y - 5)}L{_f(x + 5)},{_f(y + 5)}M{_f(x - 5)},{_f(y + 5)}'
            f'L{_f(x + 5)},{_f(y - 5)}" stroke="black" stroke-width="2"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_scatter(
    trials: Sequence[TrialRecord],
    cfg: ScoreConfig,
    path: str | Path,
    seed_point: tuple[int, float] | None = None,
) -> PlotSpec:
    """Size-vs-accuracy scatter with the front circled and an equal-score
    line through every front member. ``seed_point`` is (size_bits, accuracy)."""
    spec = scatter_spec(trials, cfg, seed_point)
    Path(path).write_text(_scatter_svg(spec))
    return spec


def bitwidth_counts(front: Sequence[TrialRecord]) -> tuple[list[int], list[dict[int, int]]]:
    if not front:
        raise ValueError("empty front")
    if any(t.policy is None for t in front):
        raise ValueError("front members carry no quantization policy (float-only run)")
    counts = [Counter(t.policy.weight_bitwidths) for t in front]
    categories = sorted(set().union(*counts))
    return categories, [dict(c) for c in counts]


def emit_bitwidth_chart(front: Sequence[TrialRecord], path: str | Path) -> list[int]:
    """Per-layer bitwidth bars for each front model, plus a CSV of counts next
    to the SVG (same stem, ``.csv``). Returns the bitwidths that occur."""
    categories, counts = bitwidth_counts(front)
    path = Path(path)
    rows = ["index," + ",".join(f"bits_{b}" for b in categories) + ",layers"]
    for t, c in zip(front, counts):
        rows.append(
            f"{t.index}," + ",".join(str(c.get(b, 0)) for b in categories) + f",{len(t.policy)}"
        )
    path.with_suffix(".csv").write_text("\n".join(rows) + "\n")

    max_layers = max(len(t.policy) for t in front)
    row_h = 44
    width = ML + max(max_layers * 8, 200) + MR
    height = MT + row_h * len(front) + 40
    bar_w = (width - ML - MR) / max_layers
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">'
    ]
    for r, t in enumerate(front):
        base = MT + row_h * (r + 1) - 6
        out.append(f'<text x="{ML - 6}" y="{base}" text-anchor="end">#{t.index}</text>')
        for j, b in enumerate(t.policy.weight_bitwidths):
            h = (row_h - 10) * b / 8
            color = BIT_COLORS.get(b, "#555")
            out.append(
                f'<rect x="{_f(ML + j * bar_w)}" y="{_f(base - h)}" width="{_f(bar_w * 0.85)}" '
                f'height="{_f(h)}" fill="{color}"><title>layer {j}: {b} bit</title></rect>'
            )
    lx = ML
    for b in categories:
        y = height - 14
        out.append(f'<rect x="{lx}" y="{y - 9}" width="10" height="10" fill="{BIT_COLORS.get(b, "#555")}"/>')
        out.append(f'<text x="{lx + 14}" y="{y}">{b}-bit</text>')
        lx += 60
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return categories


COST_COLUMNS = (
    "mode",
    "seed",
    "trials",
    "search_seconds",
    "final_seconds",
    "total_seconds",
    "seconds_per_trial",
    "scenarios",
    "seconds_per_scenario",
)


def cost_rows(summaries: Sequence[dict]) -> list[dict]:
    if not summaries:
        raise ValueError("need at least one completed run")
    rows = []
    for s in summaries:
        total = s["search_seconds"] + s["final_seconds"]
        rows.append(
            {
                "mode": s["mode"],
                "seed": s["seed"],
                "trials": s["trials"],
                "search_seconds": s["search_seconds"],
                "final_seconds": s["final_seconds"],
                "total_seconds": total,
                "seconds_per_trial": s["search_seconds"] / s["trials"],
                "scenarios": 1,
                "seconds_per_scenario": total,
            }
        )
    return rows


def emit_cost_table(summaries: Sequence[dict], path: str | Path) -> list[dict]:
    """One row per run: wall-clock totals and per-trial means for N=1
    deployment scenario."""
    rows = cost_rows(summaries)
    lines = [",".join(COST_COLUMNS)]
    for r in rows:
        lines.append(
            ",".join(f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in COST_COLUMNS)
        )
    Path(path).write_text("\n".join(lines) + "\n")
    return rows

