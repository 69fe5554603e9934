"""Standalone SVG rendering of observed, ground-truth and predicted paths."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import quoteattr

import numpy as np

from .data import CLASS_NAMES

CLASS_COLORS = ("#1f77b4", "#2ca02c", "#ff7f0e", "#d62728", "#9467bd", "#8c564b")
OBSERVED_COLOR = "#1f3fbf"
TRUTH_COLOR = "#d62728"


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def render_svg(
    observed: np.ndarray,
    truth: np.ndarray | None,
    predictions: np.ndarray | None,
    class_ids=None,
    radius: float = 2.5,
    margin: float = 20.0,
) -> str:
    """Build the document text. Arrays are ``[T, N, 2]`` pixel positions.

    Observed steps are filled circles, ground truth hollow circles, and each
    agent's predicted path a polyline colored by its class.
    """
    observed = np.asarray(observed, dtype=float)
    parts = [p for p in (observed, truth, predictions) if p is not None and np.size(p)]
    pts = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 2) for p in parts])
    lo = pts.min(axis=0) - margin if len(pts) else np.zeros(2)
    hi = pts.max(axis=0) + margin if len(pts) else np.full(2, 2 * margin)
    w, h = np.maximum(hi - lo, 1.0)
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_fmt(w)}" height="{_fmt(h)}" viewBox="{_fmt(lo[0])} {_fmt(lo[1])} {_fmt(w)} {_fmt(h)}">',
        f'<rect x="{_fmt(lo[0])}" y="{_fmt(lo[1])}" width="{_fmt(w)}" height="{_fmt(h)}" fill="white"/>',
    ]
    n = observed.shape[1] if observed.ndim == 3 else 0
    if class_ids is None:
        class_ids = np.zeros(n, dtype=int)
    for i in range(n):
        cls = int(class_ids[i])
        color = CLASS_COLORS[cls % len(CLASS_COLORS)]
        label = CLASS_NAMES[cls] if 0 <= cls < len(CLASS_NAMES) else str(cls)
        out.append(f'<g id="agent-{i}" data-class={quoteattr(label)}>')
        for x, y in observed[:, i]:
            out.append(
                f'<circle class="observed" cx="{_fmt(x)}" cy="{_fmt(y)}" r="{radius}" '
                f'fill="{OBSERVED_COLOR}"/>'
            )
        if truth is not None and np.size(truth):
            for x, y in np.asarray(truth)[:, i]:
                out.append(
                    f'<circle class="truth" cx="{_fmt(x)}" cy="{_fmt(y)}" r="{radius}" '
                    f'fill="none" stroke="{TRUTH_COLOR}" stroke-width="1"/>'
                )
        if predictions is not None and np.size(predictions):
            path = np.concatenate([observed[-1:, i], np.asarray(predictions)[:, i]])
            coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in path)
            out.append(
                f'<polyline class="prediction" points="{coords}" fill="none" '
                f'stroke="{color}" stroke-width="1.5"/>'
            )
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(observed, truth, predictions, path: str | Path, class_ids=None) -> Path:
    """Render and write; ``class_ids`` defaults to all pedestrians."""
    observed = np.asarray(observed, dtype=float)
    if class_ids is None:
        class_ids = np.zeros(observed.shape[1], dtype=int)
    path = Path(path)
    path.write_text(render_svg(observed, truth, predictions, class_ids), encoding="utf-8")
    return path
