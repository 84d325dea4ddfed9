"""Render run and evaluation figures to PNG files.

The report paths write these alongside their JSON/CSV outputs: a run
produces training-loss curves, per-round validation mIoU, and pseudo-label
acceptance counts under <run_dir>/figures/; `evaluate` drops a per-class IoU
bar chart next to its metrics.json.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_run_figures(report: dict, run_dir: str | Path) -> list[Path]:
    out_dir = Path(run_dir) / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(report["stage0"]["loss_history"], label="stage 0")
    for rnd in report["rounds"]:
        if rnd["stage1"]["loss_history"]:
            ax.plot(rnd["stage1"]["loss_history"], label=f"round {rnd['round']} stage 1")
        for fold in rnd["folds"]:
            ax.plot(fold["loss_history"], alpha=0.4, linewidth=0.8,
                    label=f"round {rnd['round']} fold {fold['fold']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean cross-entropy")
    ax.set_title("training loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if report["rounds"]:
        rounds = [r["round"] for r in report["rounds"]]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        ax1.axhline(report["stage0"]["val_miou"], color="gray", linestyle="--",
                    label="stage 0")
        ax1.plot(rounds, [r["mean_val_miou"] for r in report["rounds"]],
                 marker="o", label="round mean")
        for rnd in report["rounds"]:
            ax1.scatter([rnd["round"]] * len(rnd["folds"]),
                        [f["val_miou"] for f in rnd["folds"]],
                        alpha=0.5, s=14, color="tab:orange")
        ax1.set_xlabel("round")
        ax1.set_ylabel("validation mIoU")
        ax1.set_xticks(rounds)
        ax1.legend(fontsize=8)
        ax1.set_title("cross-validation quality")

        width = 0.35
        ax2.bar([r - width / 2 for r in rounds],
                [r["counts"]["accepted"] for r in report["rounds"]],
                width, label="accepted")
        ax2.bar([r + width / 2 for r in rounds],
                [r["counts"]["rejected"] for r in report["rounds"]],
                width, label="rejected")
        ax2.set_xlabel("round")
        ax2.set_ylabel("pseudo-labels")
        ax2.set_xticks(rounds)
        ax2.legend(fontsize=8)
        ax2.set_title("pseudo-label filtering")
        fig.tight_layout()
        path = out_dir / "selftrain_progress.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    return written


def render_metrics_figure(metrics: dict, path: str | Path) -> Path:
    per_class = metrics["per_class_iou"]
    labels = [str(i) for i in range(len(per_class))]
    values = [v if v is not None else 0.0 for v in per_class]
    absent = [v is None for v in per_class]

    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color="tab:green")
    for bar, is_absent in zip(bars, absent):
        if is_absent:
            bar.set_color("lightgray")
    ax.axhline(metrics["miou"], color="black", linestyle="--",
               label=f"mIoU = {metrics['miou']:.4f}")
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("per-class IoU (gray = absent)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
