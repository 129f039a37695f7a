"""Figures from the experiment CSVs.

The CSVs stay the primary record; this renders PNG views of them plus a
per-cell aggregate table.  matplotlib is imported lazily with the Agg
backend so the rest of the package never needs it.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .experiment import write_rows


def _read(path: Path) -> list[dict]:
    if not path.exists() or path.stat().st_size == 0:
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cell_means(summary: list[dict]) -> list[dict]:
    """Mean and spread of final mAP per cell, in first-seen cell order."""
    by_cell: dict[str, list[float]] = defaultdict(list)
    for r in summary:
        by_cell[r["cell"]].append(float(r["final_map"]))
    return [{"cell": c, "seeds": len(v), "mean_map": float(np.mean(v)), "std_map": float(np.std(v)),
             "min_map": float(np.min(v)), "max_map": float(np.max(v))} for c, v in by_cell.items()]


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _final_map_figure(plt, summary, path):
    cells = list(dict.fromkeys(r["cell"] for r in summary))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, c in enumerate(cells):
        vals = [float(r["final_map"]) for r in summary if r["cell"] == c]
        ax.bar(i, np.mean(vals), color="0.8", edgecolor="0.3")
        ax.scatter(np.full(len(vals), i), vals, color="k", s=12, zorder=3)
    ax.set_xticks(range(len(cells)), cells)
    ax.set_ylabel("final target mAP")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _epoch_figure(plt, epochs, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    cells = list(dict.fromkeys(r["cell"] for r in epochs))
    for c in cells:
        rows = [r for r in epochs if r["cell"] == c]
        ep = sorted({int(r["epoch"]) for r in rows})
        for ax, key in zip(axes, ("target_map", "pseudo_boxes")):
            ax.plot(ep, [np.mean([float(r[key]) for r in rows if int(r["epoch"]) == e]) for e in ep],
                    marker="o", label=c)
    axes[0].set_ylabel("target mAP")
    axes[1].set_ylabel("pseudo boxes")
    for ax in axes:
        ax.set_xlabel("distillation epoch")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _teacher_figure(plt, log, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for variant in dict.fromkeys(r["teacher"] for r in log):
        rows = [r for r in log if r["teacher"] == variant and r["phase"] == "pretrain"]
        ep = sorted({int(r["epoch"]) for r in rows})
        ax.plot(ep, [np.mean([float(r["total"]) for r in rows if int(r["epoch"]) == e]) for e in ep],
                label=variant)
    ax.set_xlabel("pre-training epoch")
    ax.set_ylabel("mean teacher loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _head_loss_figure(plt, rows, path):
    sources = list(dict.fromkeys(r["source"] for r in rows))
    m = np.array([[np.mean([float(r[f"head_{h}"]) for r in rows if r["source"] == s]) for h in sources]
                  for s in sources])
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(m, cmap="viridis")
    ax.set_xticks(range(len(sources)), sources)
    ax.set_yticks(range(len(sources)), sources)
    ax.set_xlabel("head")
    ax.set_ylabel("held-out source")
    for i in range(len(sources)):
        for j in range(len(sources)):
            ax.text(j, i, f"{m[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _alpha_figure(plt, summary, path):
    cols = [c for c in summary[0] if c.startswith("mean_alpha_")]
    cells = [c for c in dict.fromkeys(r["cell"] for r in summary) if "htrm" in c or "trkp" in c]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(cols), 1)
    for j, col in enumerate(cols):
        vals = [np.mean([float(r[col]) for r in summary if r["cell"] == c]) for c in cells]
        ax.bar(np.arange(len(cells)) + j * width, vals, width, label=col.removeprefix("mean_alpha_"))
    ax.set_xticks(np.arange(len(cells)) + width * (len(cols) - 1) / 2, cells)
    ax.set_ylabel("mean relevance weight")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_report(run_dir, fig_dir) -> list[Path]:
    """Render every figure whose source CSV exists; returns the written paths."""
    run_dir, fig_dir = Path(run_dir), Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    summary = _read(run_dir / "summary.csv")
    epochs = _read(run_dir / "epoch_metrics.csv")
    log = _read(run_dir / "teacher_log.csv")
    heads = _read(run_dir / "head_losses.csv")
    plt = _plt()
    written = []
    if summary:
        p = fig_dir / "cell_means.csv"
        write_rows(cell_means(summary), p)
        written.append(p)
        _final_map_figure(plt, summary, fig_dir / "final_map.png")
        written.append(fig_dir / "final_map.png")
        if any(("htrm" in r["cell"] or "trkp" in r["cell"]) for r in summary):
            _alpha_figure(plt, summary, fig_dir / "relevance_weights.png")
            written.append(fig_dir / "relevance_weights.png")
    if epochs:
        _epoch_figure(plt, epochs, fig_dir / "distill_curves.png")
        written.append(fig_dir / "distill_curves.png")
    if log:
        _teacher_figure(plt, log, fig_dir / "teacher_loss.png")
        written.append(fig_dir / "teacher_loss.png")
    if heads:
        _head_loss_figure(plt, heads, fig_dir / "head_losses.png")
        written.append(fig_dir / "head_losses.png")
    return written
