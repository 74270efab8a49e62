"""Render figures from run and ablation outputs.

Consumes the metrics JSON / CSV files the pipeline writes and saves PNG
figures next to them.  Kept separate from the training path: metrics files
stay the canonical machine-readable handoff.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_GROUP_ORDER = ("many", "medium", "few", "overall")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def fig_group_accuracy(metrics: dict, path: Path) -> Path:
    """Grouped bars: Many/Medium/Few/overall accuracy for each trained model."""
    models = [k for k in ("test_m1", "test_m2") if k in metrics]
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(models), 1)
    ticks = np.arange(len(_GROUP_ORDER))
    for i, key in enumerate(models):
        rep = metrics[key]
        vals = [rep["groups"].get(g, rep["overall"] if g == "overall" else np.nan) for g in _GROUP_ORDER]
        ax.bar(ticks + i * width, vals, width, label=key.replace("test_", "stage "))
    ax.set_xticks(ticks + width * (len(models) - 1) / 2)
    ax.set_xticklabels(_GROUP_ORDER)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("group-wise test accuracy")
    return _save(fig, path)


def fig_training_traces(metrics: dict, path: Path) -> Path:
    """Loss and validation accuracy per epoch for each stage."""
    stages = [k for k in ("stage1", "stage2") if k in metrics and metrics[k].get("loss_trace")]
    fig, axes = plt.subplots(1, max(len(stages), 1), figsize=(5 * max(len(stages), 1), 4), squeeze=False)
    for ax, key in zip(axes[0], stages):
        rep = metrics[key]
        epochs = np.arange(len(rep["loss_trace"]))
        ax.plot(epochs, rep["loss_trace"], label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if rep.get("val_acc_trace"):
            twin = ax.twinx()
            twin.plot(epochs, rep["val_acc_trace"], color="tab:orange", label="val acc")
            twin.set_ylabel("val accuracy")
            twin.set_ylim(0, 1)
        ax.set_title(key)
    return _save(fig, path)


def fig_alpha_trace(metrics: dict, path: Path) -> Path:
    """Adjustment-strength trajectory for each stage that has one."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for key in ("stage1", "stage2"):
        rep = metrics.get(key)
        if rep and rep.get("alpha_trace"):
            ax.plot(rep["alpha_trace"], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("alpha")
    ax.legend()
    ax.set_title("adjustment strength schedule")
    return _save(fig, path)


def fig_beta_trajectories(metrics: dict, path: Path) -> Path | None:
    """Per-class confidence trajectories over stage-two epochs (tail classes move)."""
    rep = metrics.get("stage2")
    if not rep or not rep.get("beta_trace"):
        return None
    trace = np.asarray(rep["beta_trace"])  # (epochs, classes)
    moving = np.flatnonzero(np.ptp(trace, axis=0) > 0)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in moving:
        ax.plot(trace[:, k], label=f"class {k}", alpha=0.7)
    ax.set_xlabel("epoch")
    ax.set_ylabel("confidence")
    ax.set_ylim(-0.02, 1.02)
    if moving.size and moving.size <= 10:
        ax.legend(fontsize="small")
    ax.set_title("adaptive calibration confidence")
    return _save(fig, path)


def render_run(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Figures for one training run directory (expects metrics.json)."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.exists():
        raise FileNotFoundError(metrics_path)
    metrics = json.loads(metrics_path.read_text())
    written = [
        fig_group_accuracy(metrics, out_dir / "group_accuracy.png"),
        fig_training_traces(metrics, out_dir / "training_traces.png"),
        fig_alpha_trace(metrics, out_dir / "alpha_trace.png"),
    ]
    beta = fig_beta_trajectories(metrics, out_dir / "beta_trajectories.png")
    if beta is not None:
        written.append(beta)
    return written


def render_ablation(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Mean accuracy per ablation row (over seeds), one panel per group."""
    csv_path, out_dir = Path(csv_path), Path(out_dir)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{csv_path} holds no ablation rows")
    by_split = defaultdict(lambda: defaultdict(list))  # split -> (row, group) -> accs
    row_order: list[str] = []
    for r in rows:
        if r["row"] not in row_order:
            row_order.append(r["row"])
        by_split[r["split"]][(r["row"], r["group"])].append(float(r["accuracy"]))
    written = []
    for split, table in by_split.items():
        groups = [g for g in _GROUP_ORDER if any(key[1] == g for key in table)]
        fig, ax = plt.subplots(figsize=(1.8 * len(row_order) + 2, 4))
        width = 0.8 / len(groups)
        ticks = np.arange(len(row_order))
        for i, g in enumerate(groups):
            means = [np.mean(table.get((row, g), [np.nan])) for row in row_order]
            ax.bar(ticks + i * width, means, width, label=g)
        ax.set_xticks(ticks + width * (len(groups) - 1) / 2)
        ax.set_xticklabels(row_order, rotation=20, ha="right")
        ax.set_ylabel("accuracy (mean over seeds)")
        ax.set_ylim(0, 1)
        ax.legend()
        ax.set_title(f"ablation: {rows[0]['axis']} ({split})")
        written.append(_save(fig, out_dir / f"ablation_{rows[0]['axis']}_{split}.png"))
    return written
