"""Report figures: precision-recall curve and per-verdict confidence histogram."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_COLORS = {"correct": "#2a9d4b", "intermediate": "#e0a526", "incorrect": "#c8373b"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, dpi=120, format=path.suffix.lstrip(".") or "png")
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_precision_recall(points, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    rec = [p.recall for p in points]
    prec = [p.precision for p in points]
    ax.step(rec, prec, where="post", color="#1f4e79")
    ax.plot(rec, prec, ".", color="#1f4e79", ms=3)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_verdict_histogram(counts: dict, edges, path, title: str = "") -> Path:
    """Stacked bars of detections per confidence bin, colored by verdict."""
    edges = np.asarray(edges, dtype=float)
    width = np.diff(edges)
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(len(width))
    for name in ("correct", "intermediate", "incorrect"):
        c = np.asarray(counts.get(name, np.zeros(len(width))), dtype=float)
        ax.bar(edges[:-1], c, width=width, bottom=bottom, align="edge", color=_COLORS[name],
               edgecolor="white", linewidth=0.5, label=name)
        bottom += c
    ax.set_xlabel("confidence (lower is better)")
    ax.set_ylabel("detections")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
