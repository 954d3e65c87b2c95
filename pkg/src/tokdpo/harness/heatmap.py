"""Per-token reward heatmaps (ANSI or self-contained HTML).

Colours come from a diverging scale centred at zero: red for negative,
blue for positive, white for zero.  The scale saturates at the largest
absolute value in the trajectory.
"""

from __future__ import annotations

import html
from typing import Sequence

import numpy as np

from ..mdp import Trajectory

NEUTRAL = (255, 255, 255)
NEGATIVE = (178, 24, 43)
POSITIVE = (33, 102, 172)
FORMATS = ("ansi", "html")


def token_colors(values: Sequence[float]) -> list[tuple[int, int, int]]:
    v = np.asarray(values, dtype=np.float64)
    scale = np.abs(v).max() if v.size else 0.0
    t = v / scale if scale > 0 else np.zeros_like(v)
    out = []
    for x in t:
        end = NEGATIVE if x < 0 else POSITIVE
        w = abs(float(x))
        out.append(tuple(int(round(n + w * (e - n))) for n, e in zip(NEUTRAL, end)))
    return out


def _label(tok: int, names) -> str:
    return str(names[tok]) if names is not None else str(tok)


def render_heatmap(
    traj: Trajectory,
    rewards: Sequence[float],
    fmt: str = "html",
    beta: float | None = None,
    ref_hash: str | None = None,
    token_names: Sequence[str] | None = None,
) -> str:
    if len(rewards) != len(traj.response):
        raise ValueError(f"{len(rewards)} rewards for {len(traj.response)} tokens")
    if fmt not in FORMATS:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    colors = token_colors(rewards)
    scale = float(np.abs(np.asarray(rewards, dtype=np.float64)).max()) if len(rewards) else 0.0
    legend = f"beta={beta!r} ref_sha256={ref_hash} scale=+/-{scale!r} (red<0<blue)"
    if fmt == "ansi":
        cells = [
            f"\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m {_label(t, token_names)} \x1b[0m"
            for t, (r, g, b) in zip(traj.response, colors)
        ]
        prompt = " ".join(_label(t, token_names) for t in traj.prompt)
        return f"[{prompt}] " + "".join(cells) + "\n" + legend + "\n"
    spans = []
    for t, val, (r, g, b) in zip(traj.response, rewards, colors):
        spans.append(
            f'<span class="tok" style="background:#{r:02x}{g:02x}{b:02x}" '
            f'title="{float(val)!r}">{html.escape(_label(t, token_names))}</span>'
        )
    prompt = html.escape(" ".join(_label(t, token_names) for t in traj.prompt))
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>token rewards</title>\n"
        "<style>body{font-family:monospace}.tok{padding:2px 4px;margin:1px;border:1px solid #ccc}"
        ".legend span{padding:2px 6px}</style></head><body>\n"
        f'<p class="prompt">prompt: {prompt}</p>\n<p class="tokens">{"".join(spans)}</p>\n'
        '<p class="legend">'
        f'<span style="background:#{NEGATIVE[0]:02x}{NEGATIVE[1]:02x}{NEGATIVE[2]:02x}">-{scale!r}</span>'
        '<span style="background:#ffffff">0</span>'
        f'<span style="background:#{POSITIVE[0]:02x}{POSITIVE[1]:02x}{POSITIVE[2]:02x}">+{scale!r}</span>'
        f" {html.escape(legend)}</p>\n</body></html>\n"
    )
