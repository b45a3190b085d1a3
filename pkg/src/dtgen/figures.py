"""Figure rendering for pipeline reports.

All plots render headlessly (Agg backend) straight to PNG files that sit
alongside the JSON/CSV outputs they illustrate.  Figures are documentation,
not data: byte content varies across matplotlib versions, so nothing here
participates in golden-file comparisons.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)

_DPI = 110


def score_histogram(
    scores: Sequence[float],
    thresholds: dict[str, float],
    out_path: str | Path,
    bins: int = 40,
) -> Path:
    """Histogram of similarity scores with labeled threshold lines."""
    out = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(list(scores), bins=bins, color="#4878cf", edgecolor="white")
    for label, value in sorted(thresholds.items()):
        ax.axvline(value, color="#d65f5f", linestyle="--", linewidth=1.2)
        ax.text(value, ax.get_ylim()[1] * 0.95, label, rotation=90, va="top", fontsize=8)
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("samples")
    ax.set_title("Image-text similarity scores")
    fig.tight_layout()
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out


def class_counts_bar(
    label_counts: dict[str, dict[str, int]], out_path: str | Path
) -> Path:
    """Grouped bars of per-label counts, one group color per origin."""
    out = Path(out_path)
    origins = sorted(label_counts)
    labels = sorted({name for counts in label_counts.values() for name in counts})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(origins))
    for i, origin in enumerate(origins):
        counts = label_counts[origin]
        xs = [j + i * width for j in range(len(labels))]
        ax.bar(xs, [counts.get(name, 0) for name in labels], width=width, label=origin)
    ax.set_xticks([j + width * (len(origins) - 1) / 2 for j in range(len(labels))])
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("samples")
    ax.set_title("Dataset composition by label")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out


def slot_coverage_chart(
    coverage: dict[str, dict[str, int]], out_path: str | Path
) -> Path:
    """One bar panel per slot showing option usage counts by option index."""
    out = Path(out_path)
    slots = sorted(coverage)
    if not slots:
        fig, ax = plt.subplots(figsize=(6, 2))
        ax.text(0.5, 0.5, "no synthetic samples", ha="center", va="center")
        ax.set_axis_off()
    else:
        fig, axes = plt.subplots(len(slots), 1, figsize=(8, 2.2 * len(slots)), squeeze=False)
        for ax, slot in zip(axes[:, 0], slots):
            usage = coverage[slot]
            indices = sorted(usage, key=int)
            ax.bar(range(len(indices)), [usage[i] for i in indices], color="#6acc65")
            ax.set_title(slot, fontsize=9)
            ax.set_ylabel("uses", fontsize=8)
            ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out


def confusion_heatmap(
    counts: Sequence[Sequence[int]], class_names: Sequence[str], out_path: str | Path
) -> Path:
    """Annotated confusion-matrix heatmap (rows true, columns predicted)."""
    out = Path(out_path)
    n = len(class_names)
    fig, ax = plt.subplots(figsize=(1.4 * n + 2, 1.4 * n + 1.5))
    image = ax.imshow(counts, cmap="Blues")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(counts[i][j]), ha="center", va="center", fontsize=9)
    ax.set_xticks(range(n))
    ax.set_xticklabels(class_names, rotation=30, ha="right")
    ax.set_yticks(range(n))
    ax.set_yticklabels(class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("Confusion matrix")
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out


def render_report_figures(report: dict[str, Any], out_dir: str | Path) -> list[Path]:
    """All figures derivable from a pipeline report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        class_counts_bar(report.get("labels", {}), out / "class_counts.png"),
        slot_coverage_chart(report.get("slot_coverage", {}), out / "slot_coverage.png"),
    ]
    return written
