"""Dependency-free SVG scatter rendering for the sim-to-real series.

Hand-written SVG keeps the plot bytes deterministic: same points in, same
file out.
"""

from __future__ import annotations

from typing import Sequence

from .evaluation import CENTRALIZED, Sim2RealPoint

_WIDTH = 640
_HEIGHT = 420
_MARGIN_L = 64
_MARGIN_R = 24
_MARGIN_T = 32
_MARGIN_B = 56

_CENTRALIZED_COLOR = "#d9832e"
_FEDERATED_COLOR = "#8a3f9e"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_sim2real_svg(points: Sequence[Sim2RealPoint],
                        title: str = "Accuracy on the mixed real-domain hold-out") -> str:
    """Two-series labeled scatter: centralized circles, federated triangles."""
    if not points:
        raise ValueError("nothing to plot")
    labels: list[str] = []
    for pt in points:
        if pt.combination not in labels:
            labels.append(pt.combination)
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def x_at(combination: str) -> float:
        i = labels.index(combination)
        return _MARGIN_L + plot_w * (i + 0.5) / len(labels)

    def y_at(acc: float) -> float:
        return _MARGIN_T + plot_h * (1.0 - acc)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for tick in range(0, 11):
        acc = tick / 10.0
        y = y_at(acc)
        parts.append(f'<line x1="{_MARGIN_L}" y1="{_fmt(y)}" x2="{_WIDTH - _MARGIN_R}" '
                     f'y2="{_fmt(y)}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{_MARGIN_L - 8}" y="{_fmt(y + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{acc:.1f}</text>')
    for lab in labels:
        x = x_at(lab)
        parts.append(f'<text x="{_fmt(x)}" y="{_HEIGHT - _MARGIN_B + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="12">{lab}</text>')
    parts.append(f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
                 f'y2="{_HEIGHT - _MARGIN_B}" stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{_MARGIN_L}" y1="{_HEIGHT - _MARGIN_B}" '
                 f'x2="{_WIDTH - _MARGIN_R}" y2="{_HEIGHT - _MARGIN_B}" '
                 f'stroke="black" stroke-width="1"/>')

    for pt in points:
        x = x_at(pt.combination)
        y = y_at(pt.accuracy)
        if pt.regime == CENTRALIZED:
            parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="5" '
                         f'fill="{_CENTRALIZED_COLOR}" fill-opacity="0.8"/>')
        else:
            parts.append(
                f'<polygon points="{_fmt(x)},{_fmt(y - 6)} {_fmt(x - 5.5)},{_fmt(y + 4.5)} '
                f'{_fmt(x + 5.5)},{_fmt(y + 4.5)}" fill="{_FEDERATED_COLOR}" '
                f'fill-opacity="0.8"/>')
        parts.append(f'<text x="{_fmt(x + 8)}" y="{_fmt(y - 6)}" '
                     f'font-family="sans-serif" font-size="9">{pt.accuracy:.3f}</text>')

    legend_y = _MARGIN_T + 12
    parts.append(f'<circle cx="{_MARGIN_L + 16}" cy="{legend_y}" r="5" '
                 f'fill="{_CENTRALIZED_COLOR}" fill-opacity="0.8"/>')
    parts.append(f'<text x="{_MARGIN_L + 26}" y="{legend_y + 4}" '
                 f'font-family="sans-serif" font-size="12">centralized</text>')
    parts.append(
        f'<polygon points="{_MARGIN_L + 126},{legend_y - 5} {_MARGIN_L + 120.5},{legend_y + 5} '
        f'{_MARGIN_L + 131.5},{legend_y + 5}" fill="{_FEDERATED_COLOR}" fill-opacity="0.8"/>')
    parts.append(f'<text x="{_MARGIN_L + 138}" y="{legend_y + 4}" '
                 f'font-family="sans-serif" font-size="12">federated</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
