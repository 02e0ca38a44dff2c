"""Deterministic SVG line and bar charts (plain text, no timestamps)."""

from __future__ import annotations

import math
from pathlib import Path

WIDTH, HEIGHT = 640, 400
MARGIN = 60
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


class PlotError(ValueError):
    pass


def _num(x: float) -> str:
    return f"{x:.2f}"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _span(lo: float, hi: float) -> tuple[float, float]:
    """Degenerate ranges widen to ±1 around the single value."""
    if lo == hi:
        return lo - 1.0, hi + 1.0
    return lo, hi


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _frame(title: str, xlabel: str, ylabel: str, xr, yr, xticks=True) -> list[str]:
    x0, x1 = MARGIN, WIDTH - MARGIN // 2
    y0, y1 = HEIGHT - MARGIN, MARGIN // 2
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2:.2f}" y="{HEIGHT - 18}" text-anchor="middle">{_esc(xlabel)}</text>',
           f'<text x="16" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" '
           f'transform="rotate(-90 16 {(y0 + y1) / 2:.2f})">{_esc(ylabel)}</text>']
    for v in _ticks(*yr):
        y = _sy(v, yr)
        out.append(f'<line x1="{x0 - 4}" y1="{_num(y)}" x2="{x0}" y2="{_num(y)}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{_num(y + 4)}" text-anchor="end">{v:.4g}</text>')
    if xticks:
        for v in _ticks(*xr):
            x = _sx(v, xr)
            out.append(f'<line x1="{_num(x)}" y1="{y0}" x2="{_num(x)}" y2="{y0 + 4}" stroke="black"/>')
            out.append(f'<text x="{_num(x)}" y="{y0 + 16}" text-anchor="middle">{v:.4g}</text>')
    return out


def _sx(v, xr):
    return MARGIN + (v - xr[0]) / (xr[1] - xr[0]) * (WIDTH - 1.5 * MARGIN)


def _sy(v, yr):
    return HEIGHT - MARGIN - (v - yr[0]) / (yr[1] - yr[0]) * (HEIGHT - 1.5 * MARGIN)


def line_chart(series: dict[str, list[tuple[float, float]]], title: str = "", xlabel: str = "step",
               ylabel: str = "") -> str:
    """One polyline (plus point markers) per named series on shared axes."""
    pts = [(x, y) for s in series.values() for x, y in s
           if y is not None and not math.isnan(y)]
    if not pts:
        raise PlotError("nothing to plot")
    xr = _span(min(p[0] for p in pts), max(p[0] for p in pts))
    yr = _span(min(p[1] for p in pts), max(p[1] for p in pts))
    out = _frame(title, xlabel, ylabel, xr, yr)
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        clean = [(x, y) for x, y in s if y is not None and not math.isnan(y)]
        coords = " ".join(f"{_num(_sx(x, xr))},{_num(_sy(y, yr))}" for x, y in clean)
        if len(clean) > 1:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        for x, y in clean:
            out.append(f'<circle cx="{_num(_sx(x, xr))}" cy="{_num(_sy(y, yr))}" r="2.5" fill="{color}"/>')
        ly = MARGIN // 2 + 14 * (i + 1)
        out.append(f'<text x="{WIDTH - MARGIN}" y="{ly}" text-anchor="end" fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels: list[str], values: list[float], errors: list[float] | None = None,
              title: str = "", ylabel: str = "") -> str:
    if not labels:
        raise PlotError("nothing to plot")
    errors = errors or [0.0] * len(values)
    top = max(v + e for v, e in zip(values, errors))
    yr = _span(0.0, max(top, 0.0)) if top > 0 else (0.0, 1.0)
    out = _frame(title, "", ylabel, (0.0, 1.0), yr, xticks=False)
    slot = (WIDTH - 1.5 * MARGIN) / len(labels)
    for i, (lab, v, e) in enumerate(zip(labels, values, errors)):
        x = MARGIN + slot * (i + 0.2)
        w = slot * 0.6
        y = _sy(v, yr)
        base = _sy(yr[0], yr)
        out.append(f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(w)}" height="{_num(base - y)}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        if e:
            cx = x + w / 2
            out.append(f'<line x1="{_num(cx)}" y1="{_num(_sy(v - e, yr))}" x2="{_num(cx)}" '
                       f'y2="{_num(_sy(v + e, yr))}" stroke="black"/>')
        out.append(f'<text x="{_num(x + w / 2)}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle">{_esc(lab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def training_curves(logs: dict[str, list[dict]], column: str) -> str:
    """Overlay one column of several train/validation logs, e.g. eval_sr."""
    series = {name: [(r["step"], r.get(column)) for r in rows] for name, rows in logs.items()}
    return line_chart(series, title=column, ylabel=column)


def ablation_bars(rows: list[dict], task: str | None = None) -> str:
    summ = [r for r in rows if r["row_type"] == "summary" and (task is None or r["task"] == task)]
    if not summ:
        raise PlotError("no summary rows to plot")
    labels = [f"{r['value']}" + ("" if task else f" ({r['task']})") for r in summ]
    return bar_chart(labels, [r["success_rate"] for r in summ], [r["success_rate_std"] or 0.0 for r in summ],
                     title=f"{summ[0]['axis']} ablation", ylabel="success rate")


def write_svg(path, svg: str) -> None:
    Path(path).write_text(svg)
