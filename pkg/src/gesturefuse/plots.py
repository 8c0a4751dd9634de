"""Figure rendering for report artifacts (file output only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from gesturefuse.interpret import AblationRow, AttentionReport, ContributionReport


def save_llr_contribution_bars(report: ContributionReport, path: str | Path) -> Path:
    """Bar chart of |log-odds| per modality pair for the predicted class."""
    path = Path(path)
    heights = [abs(v) for v in report.raw_llr]
    colors = ["tab:blue" if v >= 0 else "tab:red" for v in report.raw_llr]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(range(len(heights)), heights, color=colors)
    ax.set_xticks(range(len(report.pairs)))
    ax.set_xticklabels(report.pairs, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("|log-odds|")
    ax.set_title(
        f"Per-modality contribution, predicted: {report.predicted_name} "
        f"(blue: toward, red: against)"
    )
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_attention_heatmap(report: AttentionReport, path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    im = ax.imshow(report.matrix, cmap="viridis", vmin=0.0)
    ax.set_xticks(range(len(report.pairs)))
    ax.set_yticks(range(len(report.pairs)))
    ax.set_xticklabels(report.pairs, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(report.pairs, fontsize=8)
    ax.set_xlabel("attended (key)")
    ax.set_ylabel("query")
    ax.set_title(f"Modality attention, predicted: {report.predicted_name}")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_ablation_chart(rows: list[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    names = [r.subset for r in rows]
    means = [100 * r.mean_f1 for r in rows]
    stds = [100 * r.std_f1 for r in rows]
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(rows) + 1.2))
    ax.barh(y, means, xerr=stds, color="tab:blue", alpha=0.85)
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("macro F1 (%)")
    ax.set_title("Sensor-subset comparison (mean +/- std over folds)")
    ax.set_xlim(0, 105)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_confusion_matrix(
    confusion: np.ndarray, class_names: list[str], path: str | Path
) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7.5, 6.5))
    denom = np.maximum(confusion.sum(axis=1, keepdims=True), 1)
    im = ax.imshow(confusion / denom, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(class_names)))
    ax.set_yticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=90, fontsize=7)
    ax.set_yticklabels(class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("Row-normalized confusion")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
