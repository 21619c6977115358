"""SVG figures for reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .geometry import MetricReport  # noqa: E402

# fixed hash salt and no date stamp keep SVG output byte-stable
STABLE_RC = {"svg.hashsalt": "refmatch", "font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def accuracy_vs_noise(points, path, title="labeling accuracy vs position noise"):
    """``points`` are ``(sigma, accuracy, series)`` triples; one line per series."""
    with plt.rc_context(STABLE_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        series = sorted({s for _, _, s in points})
        for name in series:
            xy = sorted((x, y) for x, y, s in points if s == name)
            ax.plot([x for x, _ in xy], [y for _, y in xy], marker="o", label=name)
        ax.set_xlabel("position noise σ")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0.0, 1.02)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def per_label_bars(report: MetricReport, path, metric="accuracy"):
    labels = sorted(report.per_label)
    values = [getattr(report.per_label[l], metric) for l in labels]
    with plt.rc_context(STABLE_RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * len(labels) + 1.0), 3.2))
        ax.bar(range(len(labels)), [0.0 if v is None else v for v in values], color="#4c72b0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, ha="right")
        ax.set_ylabel(metric)
        ax.set_ylim(0.0, 1.02)
        fig.tight_layout()
        return _save(fig, path)
