"""Run summaries: CSV tables and matplotlib figures written next to them."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cell import CellTopology, _nodes_for_edges  # noqa: E402
from .search_space import OP_NAMES  # noqa: E402

PHASE_COLOURS = {"search": "tab:orange", "train": "tab:blue", "test": "tab:green"}


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def plot_curves(records: Sequence[dict], path: str | os.PathLike, title: str = "") -> None:
    """Loss (left) and accuracy (right) per epoch, one line per phase."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    for phase in sorted({r["phase"] for r in records}):
        rows = [r for r in records if r["phase"] == phase]
        epochs = [r["epoch"] for r in rows]
        colour = PHASE_COLOURS.get(phase)
        ax_loss.plot(epochs, [r["loss"] for r in rows], color=colour, label=phase)
        ax_acc.plot(epochs, [r["wa"] for r in rows], color=colour, label=f"{phase} WA")
        ax_acc.plot(epochs, [r["ua"] for r in rows], color=colour, linestyle="--", label=f"{phase} UA")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_loss.legend(frameon=False, fontsize=8)
    ax_acc.legend(frameon=False, fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_alphas(tables: dict[str, np.ndarray], edges: Sequence[tuple[int, int]], path: str | os.PathLike) -> None:
    """Softmax weight heatmap per cell kind: rows are edges, columns candidate operations."""
    kinds = [k for k in ("normal", "reduce") if k in tables]
    fig, axes = plt.subplots(1, len(kinds), figsize=(4.6 * len(kinds), 0.35 * len(edges) + 2.0), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        a = np.asarray(tables[kind], dtype=np.float64)
        w = np.exp(a - a.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        im = ax.imshow(w, aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(OP_NAMES)))
        ax.set_xticklabels(OP_NAMES, rotation=60, ha="right", fontsize=7)
        ax.set_yticks(range(len(edges)))
        ax.set_yticklabels([f"{i}->{j}" for i, j in edges], fontsize=7)
        ax.set_title(kind)
        fig.colorbar(im, ax=ax, fraction=0.05)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_entropy(snapshots: Sequence[dict], path: str | os.PathLike) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    epochs = [s["epoch"] for s in snapshots]
    for kind in ("normal", "reduce"):
        ax.plot(epochs, [s["entropy"][kind] for s in snapshots], label=kind)
    ax.axhline(np.log(len(OP_NAMES)), color="grey", linewidth=0.8, linestyle=":")
    ax.set_xlabel("completed epochs")
    ax.set_ylabel("mean edge entropy (nats)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_fold_bars(rows: Sequence[dict], path: str | os.PathLike) -> None:
    folds = [r["fold"] for r in rows]
    x = np.arange(len(folds))
    fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(folds) + 1.5), 3.2))
    ax.bar(x - 0.2, [r["wa"] for r in rows], width=0.4, label="WA")
    ax.bar(x + 0.2, [r["ua"] for r in rows], width=0.4, label="UA")
    ax.set_xticks(x)
    ax.set_xticklabels([f"fold {k}" for k in folds])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("test accuracy")
    ax.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# -- run-level summaries ---------------------------------------------------
def _fold_dirs(run_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for p in run_dir.glob("fold_*"):
        suffix = p.name.split("_", 1)[1]
        if p.is_dir() and suffix.isdigit():
            found.append((int(suffix), p))
    return sorted(found)


def summarize_search(run_dir: str | os.PathLike, figures: bool = True) -> Path:
    """summary.csv with the final-epoch metrics per fold, plus per-fold curves and alpha heatmaps."""
    run_dir = Path(run_dir)
    rows = []
    for k, fold_dir in _fold_dirs(run_dir):
        records = read_jsonl(fold_dir / "metrics.jsonl")
        snapshots = read_jsonl(fold_dir / "alphas.jsonl")
        last = {r["phase"]: r for r in records if r["epoch"] == records[-1]["epoch"]}
        genotype = (fold_dir / "genotype.json").read_text().strip()
        rows.append([k, last["search"]["loss"], last["search"]["wa"], last["search"]["ua"],
                     last["train"]["loss"], snapshots[0]["entropy"]["normal"], snapshots[-1]["entropy"]["normal"],
                     genotype])
        if figures:
            plot_curves(records, fold_dir / "curves.png", title=f"search, fold {k}")
            final = snapshots[-1]
            edges = CellTopology(_nodes_for_edges(len(final["normal"]))).edges
            plot_alphas({"normal": final["normal"], "reduce": final["reduce"]}, edges, fold_dir / "alphas.png")
            plot_entropy(snapshots, fold_dir / "entropy.png")
    out = run_dir / "summary.csv"
    write_csv(out, ["fold", "search_loss", "search_wa", "search_ua", "train_loss",
                    "entropy_start", "entropy_end", "genotype"],
              [[_fmt(v) for v in row] for row in rows])
    return out


def summarize_train(run_dir: str | os.PathLike, figures: bool = True) -> Path:
    """summary.csv with per-fold test metrics and the mean/std rows, plus training curves."""
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    rows = [[f["fold"], f["loss"], f["wa"], f["ua"]] for f in report["folds"]]
    rows.append(["mean", report["mean"]["loss"], report["mean"]["wa"], report["mean"]["ua"]])
    rows.append(["std", report["std"]["loss"], report["std"]["wa"], report["std"]["ua"]])
    out = run_dir / "summary.csv"
    write_csv(out, ["fold", "test_loss", "test_wa", "test_ua"], [[_fmt(v) for v in row] for row in rows])
    if figures:
        for k, fold_dir in _fold_dirs(run_dir):
            records = [r for r in read_jsonl(fold_dir / "metrics.jsonl") if r["phase"] != "test"]
            plot_curves(records, fold_dir / "curves.png", title=f"{report['model']}, fold {k}")
        plot_fold_bars(report["folds"], run_dir / "folds.png")
    return out


def summarize(run_dir: str | os.PathLike, figures: bool = True) -> Path:
    run_dir = Path(run_dir)
    if (run_dir / "report.json").exists():
        return summarize_train(run_dir, figures)
    if _fold_dirs(run_dir):
        return summarize_search(run_dir, figures)
    raise FileNotFoundError(f"{run_dir}: neither a search nor a train run directory")
