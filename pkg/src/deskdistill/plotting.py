"""Figures rendered next to the CSV / JSONL artifacts of a run or sweep."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def read_trajectory(path) -> dict[int, dict[int, tuple[list[int], list[float]]]]:
    """student layer -> block index -> (steps, weights)."""
    series = defaultdict(lambda: defaultdict(lambda: ([], [])))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps, weights = series[int(row["student_layer"])][int(row["block_index"])]
            steps.append(int(row["step"]))
            weights.append(float(row["weight"]))
    return series


def plot_trajectory(csv_paths, png_path, labels=None):
    """Learned weight v(m)[j] against step, one panel per student layer.

    Several trajectory files (e.g. two initializations) are overlaid with
    different line styles.
    """
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]
    labels = labels or [Path(p).parent.name for p in csv_paths]
    runs = [read_trajectory(p) for p in csv_paths]
    layers = sorted({m for run in runs for m in run})
    styles = ["-", "--", ":", "-."]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(layers), figsize=(4 * len(layers), 3), squeeze=False)
        for ax, m in zip(axes[0], layers):
            for r, (run, label) in enumerate(zip(runs, labels)):
                for j, (steps, weights) in sorted(run.get(m, {}).items()):
                    ax.plot(steps, weights, styles[r % len(styles)], color=f"C{j - 1}",
                            label=f"{label} j={j}" if len(runs) > 1 else f"j={j}")
            ax.set_title(f"student layer {m}")
            ax.set_xlabel("step")
            ax.set_ylabel("v(m)[j]")
            ax.set_ylim(0, 1)
        axes[0][-1].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path


def plot_losses(metrics_path, png_path):
    """Per-step loss components of stage 1 and the prediction loss of stage 2."""
    stage1 = defaultdict(list)
    stage2 = []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("event") != "step":
                continue
            if rec["stage"] == "stage1":
                for key in ("loss_total", "loss_embd", "loss_hidn", "loss_attn"):
                    stage1[key].append(rec[key])
            elif rec["stage"] == "stage2":
                stage2.append(rec["loss_pred"])
    panels = [p for p in (stage1 and "stage1", stage2 and "stage2") if p]
    if not panels:
        return None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(4.5 * len(panels), 3), squeeze=False)
        for ax, panel in zip(axes[0], panels):
            if panel == "stage1":
                for key, values in stage1.items():
                    ax.plot(values, label=key.removeprefix("loss_"), lw=0.8)
                ax.set_title("transformer-layer stage")
                ax.legend()
            else:
                ax.plot(stage2, lw=0.8, color="C4")
                ax.set_title("prediction-layer stage")
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path


def plot_sweep_table(table_csv, png_path, metric_name="metric"):
    with open(table_csv, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["metric"] not in ("", "none")]
    if not rows:
        return None
    names = [r["variant"] for r in rows][::-1]
    values = [float(r["metric"]) for r in rows][::-1]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.45 * len(rows) + 1.2))
        ax.barh(names, values, color="C0")
        for y, v in enumerate(values):
            ax.text(v, y, f" {v:.4f}", va="center", fontsize=8)
        ax.set_xlabel(metric_name)
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path
