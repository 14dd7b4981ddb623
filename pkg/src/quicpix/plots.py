"""Report figures. Uses the object-oriented matplotlib API with the Agg canvas,
so nothing touches pyplot global state and figures render headless."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .labels import ResponseDistribution
from .render import TrafficImage

# no timestamp or version chunks, so repeated renders are byte-identical
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, **_SAVE_KW)
    return path


def response_distribution_figure(dist: ResponseDistribution, path, title: str = "Responses per window") -> Path:
    fig = Figure(figsize=(5.0, 3.0), layout="constrained")
    ax = fig.add_subplot()
    total = dist.total or 1
    ax.bar(np.arange(len(dist.counts)), np.asarray(dist.counts) / total, color="tab:blue", width=0.8)
    ax.set_xlabel("responses in window")
    ax.set_ylabel("share of images")
    ax.set_xticks(np.arange(0, len(dist.counts), 2))
    ax.set_title(f"{title} (labels 0-2: {dist.low_share:.0%})", fontsize=9)
    return _save(fig, path)


def per_trace_scatter(points: Sequence[tuple[int, int]], path, tolerance: int = 3, alpha: float = 0.05) -> Path:
    """Predicted vs. true summed responses, one translucent point per trace."""
    fig = Figure(figsize=(4.0, 4.0), layout="constrained")
    ax = fig.add_subplot()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    top = max(1.0, pts.max()) if len(pts) else 1.0
    diag = np.array([0.0, top])
    ax.fill_between(diag, diag - tolerance, diag + tolerance, color="0.9", lw=0)
    ax.plot(diag, diag, color="0.4", lw=0.8)
    ax.scatter(pts[:, 0], pts[:, 1], s=12, alpha=alpha, color="tab:red", edgecolors="none")
    ax.set_xlim(0, top)
    ax.set_ylim(0, top)
    ax.set_aspect("equal")
    ax.set_xlabel("true responses per trace")
    ax.set_ylabel("predicted responses per trace")
    return _save(fig, path)


def traffic_image_figure(img: TrafficImage, path) -> Path:
    fig = Figure(figsize=(3.2, 3.2), layout="constrained")
    ax = fig.add_subplot()
    ax.imshow(img.pixels, interpolation="nearest", origin="upper")
    ax.set_xlabel("time bin")
    ax.set_ylabel("length bin")
    ax.set_title(f"{img.trace_id} #{img.window_index}", fontsize=8)
    return _save(fig, path)
