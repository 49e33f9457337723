"""
Self-contained SVG line plots for the CSV artifacts the CLI writes.
Output depends only on the CSV contents, so identical inputs give identical files.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Tuple, Union
from xml.sax.saxutils import escape

from errors import PlotInputError

# Configure logging
logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 400
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 150, 40, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e")
TICKS = 5

# kind -> (title, x label, y label, x column, series columns)
PLOT_KINDS: Dict[str, Tuple[str, str, str, str, Tuple[str, ...]]] = {
    "keyrate": ("Secret key rate vs modulation variance", "V_mod (SNU)", "bits/pulse", "v_mod", ("i_ab", "chi_be", "r_sec")),
    "gamma_pdf": ("Coherent efficiency distribution", "gamma", "probability density", "bin_lo", ("pdf_before", "pdf_after")),
    "loss": ("Training loss", "epoch", "MSE (rad^2)", "epoch", ("train_loss",)),
}


def read_columns(path: Union[str, Path], kind: str) -> Dict[str, List[float]]:
    """Read the numeric columns a plot kind needs."""
    if kind not in PLOT_KINDS:
        raise PlotInputError(f"unknown plot kind '{kind}'; expected one of {', '.join(sorted(PLOT_KINDS))}")
    _, _, _, x_column, series = PLOT_KINDS[kind]
    required = [x_column, *series] + (["bin_hi"] if kind == "gamma_pdf" else [])
    try:
        with Path(path).open(newline="") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as e:
        raise PlotInputError(f"cannot read {path}: {e}")
    if not rows:
        raise PlotInputError(f"{path} has no data rows")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise PlotInputError(f"{path} lacks column(s) {', '.join(missing)} for a '{kind}' plot")
    columns: Dict[str, List[float]] = {c: [] for c in required}
    for number, row in enumerate(rows, start=2):
        for c in required:
            try:
                value = float(row[c])
            except (TypeError, ValueError):
                raise PlotInputError(f"{path}:{number}: column {c} is not numeric ({row[c]!r})")
            if not math.isfinite(value):
                raise PlotInputError(f"{path}:{number}: column {c} is not finite")
            columns[c].append(value)
    return columns


def _ticks(lo: float, hi: float) -> List[float]:
    return [lo + (hi - lo) * i / (TICKS - 1) for i in range(TICKS)]


def _padded_range(values: List[float]) -> Tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def render_svg(
    title: str, x_label: str, y_label: str, series: List[Tuple[str, List[float], List[float]]]
) -> str:
    """
    Render named (x, y) series as polylines with axes, ticks and a legend.

    Args:
        title: Plot title
        x_label: Horizontal axis label
        y_label: Vertical axis label
        series: (name, xs, ys) triples
    """
    x_lo, x_hi = _padded_range([x for _, xs, _ in series for x in xs])
    y_lo, y_hi = _padded_range([y for _, _, ys in series for y in ys])
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def sx(x: float) -> float:
        return MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="{MARGIN_TOP / 2 + 4:.2f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP + plot_h}" x2="{MARGIN_LEFT + plot_w}" y2="{MARGIN_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{MARGIN_TOP + plot_h}" stroke="black"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        x = sx(tick)
        lines.append(f'<line x1="{x:.2f}" y1="{MARGIN_TOP + plot_h}" x2="{x:.2f}" y2="{MARGIN_TOP + plot_h + 5}" stroke="black"/>')
        lines.append(f'<text x="{x:.2f}" y="{MARGIN_TOP + plot_h + 18}" text-anchor="middle">{tick:.3g}</text>')
    for tick in _ticks(y_lo, y_hi):
        y = sy(tick)
        lines.append(f'<line x1="{MARGIN_LEFT - 5}" y1="{y:.2f}" x2="{MARGIN_LEFT}" y2="{y:.2f}" stroke="black"/>')
        lines.append(f'<text x="{MARGIN_LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{tick:.3g}</text>')
    lines.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(x_label)}</text>'
    )
    lines.append(
        f'<text x="15" y="{MARGIN_TOP + plot_h / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {MARGIN_TOP + plot_h / 2:.2f})">{escape(y_label)}</text>'
    )
    for index, (name, xs, ys) in enumerate(series):
        color = COLORS[index % len(COLORS)]
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        legend_y = MARGIN_TOP + 10 + 20 * index
        legend_x = MARGIN_LEFT + plot_w + 15
        lines.append(f'<line x1="{legend_x}" y1="{legend_y}" x2="{legend_x + 20}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        lines.append(f'<text x="{legend_x + 26}" y="{legend_y + 4}">{escape(name)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def plot_csv(in_csv: Union[str, Path], out_svg: Union[str, Path], kind: str) -> Path:
    """Render a CSV written by the CLI as an SVG plot of the given kind."""
    columns = read_columns(in_csv, kind)
    title, x_label, y_label, x_column, names = PLOT_KINDS[kind]
    series = []
    for name in names:
        if kind == "gamma_pdf":
            # histogram outline: one flat step per bin
            xs, ys = [], []
            for lo, hi, y in zip(columns["bin_lo"], columns["bin_hi"], columns[name]):
                xs += [lo, hi]
                ys += [y, y]
            series.append((name, xs, ys))
        else:
            series.append((name, columns[x_column], columns[name]))
    out = Path(out_svg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(title, x_label, y_label, series))
    logger.info(f"Wrote {kind} plot {out}")
    return out
