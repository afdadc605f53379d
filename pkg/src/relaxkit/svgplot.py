"""Tiny deterministic SVG box-plot renderer for report tables.

The numeric record lives in the CSVs; these plots are a convenience view, so
the renderer is intentionally minimal (no external plotting dependency, stable
output for a given input).
"""

from __future__ import annotations

from typing import Sequence

_WIDTH = 640
_HEIGHT = 360
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 20, 40, 70


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def box_plot_svg(
    title: str,
    ylabel: str,
    groups: Sequence[tuple[str, dict]],
) -> str:
    """Render labeled box stats ({median,q1,q3,min,max} dicts) as an SVG string."""
    if not groups:
        raise ValueError("nothing to plot")
    lo = min(g["min"] for _, g in groups)
    hi = max(g["max"] for _, g in groups)
    if hi == lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def y_of(value: float) -> float:
        return _MARGIN_T + plot_h * (1.0 - (value - lo) / (hi - lo))

    slot = plot_w / len(groups)
    box_w = min(40.0, slot * 0.5)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
        f'<text x="16" y="{_MARGIN_T + plot_h / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {_MARGIN_T + plot_h / 2})">'
        f"{ylabel}</text>",
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{_MARGIN_T + plot_h}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T + plot_h}" '
        f'x2="{_MARGIN_L + plot_w}" y2="{_MARGIN_T + plot_h}" stroke="black"/>',
    ]
    for i in range(5):
        value = lo + (hi - lo) * i / 4.0
        y = y_of(value)
        parts.append(
            f'<line x1="{_MARGIN_L - 4}" y1="{_fmt(y)}" x2="{_MARGIN_L}" '
            f'y2="{_fmt(y)}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_MARGIN_L - 8}" y="{_fmt(y + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_fmt(value)}</text>'
        )
    for index, (label, g) in enumerate(groups):
        cx = _MARGIN_L + slot * (index + 0.5)
        x0, x1 = cx - box_w / 2, cx + box_w / 2
        top, bottom = y_of(g["q3"]), y_of(g["q1"])
        parts += [
            f'<line x1="{_fmt(cx)}" y1="{_fmt(y_of(g["max"]))}" x2="{_fmt(cx)}" '
            f'y2="{_fmt(top)}" stroke="black"/>',
            f'<line x1="{_fmt(cx)}" y1="{_fmt(bottom)}" x2="{_fmt(cx)}" '
            f'y2="{_fmt(y_of(g["min"]))}" stroke="black"/>',
            f'<rect x="{_fmt(x0)}" y="{_fmt(top)}" width="{_fmt(x1 - x0)}" '
            f'height="{_fmt(max(bottom - top, 0.5))}" fill="#9ecae1" stroke="black"/>',
            f'<line x1="{_fmt(x0)}" y1="{_fmt(y_of(g["median"]))}" x2="{_fmt(x1)}" '
            f'y2="{_fmt(y_of(g["median"]))}" stroke="black" stroke-width="2"/>',
            f'<text x="{_fmt(cx)}" y="{_HEIGHT - _MARGIN_B + 16}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif" '
            f'transform="rotate(30 {_fmt(cx)} {_HEIGHT - _MARGIN_B + 16})">{label}</text>',
        ]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_report_plots(report, out_dir) -> list[str]:
    """One SVG per (table, metric grouping) for the standard report kinds."""
    import os

    written = []
    for table_name, rows in report.tables.items():
        if not rows or "median" not in rows[0]:
            continue
        by_channel: dict[str, list] = {}
        for row in rows:
            key = str(row.get("channel", "all"))
            label = ":".join(
                str(row[k]) for k in ("estimator", "snr") if k in row
            )
            by_channel.setdefault(key, []).append((label, row))
        for channel, groups in sorted(by_channel.items()):
            name = f"{table_name}_{channel}.svg"
            svg = box_plot_svg(
                f"{report.kind}: {table_name} ({channel})",
                "percent",
                groups,
            )
            path = os.path.join(os.fspath(out_dir), name)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
            written.append(name)
    return written
