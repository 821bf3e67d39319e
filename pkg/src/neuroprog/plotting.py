"""Report figures rendered to files (no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def search_progress(history: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    phases = list(dict.fromkeys(r["phase"] for r in history))
    x0 = 0
    for ph in phases:
        rows = [r for r in history if r["phase"] == ph]
        xs = np.arange(x0, x0 + len(rows))
        ax.plot(xs, [r["best_f1"] for r in rows], marker="o", ms=3, label=f"{ph} best")
        ax.plot(xs, [r["mean_f1"] for r in rows], ls="--", label=f"{ph} mean")
        x0 += len(rows)
    ax.set_xlabel("generation")
    ax.set_ylabel("validation F1")
    ax.legend(fontsize=8)
    return _save(fig, path)


def loss_curve(curve: Sequence[float], path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(curve) + 1), curve)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def op_frequency(counts: Mapping[int, int], path) -> Path:
    seqs = np.arange(1, 17)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(seqs, [counts.get(int(s), 0) for s in seqs], color="tab:blue")
    ax.set_xticks(seqs)
    ax.set_xlabel("operation sequence")
    ax.set_ylabel("count")
    return _save(fig, path)


def neuron_fraction(fractions: Sequence[float], path) -> Path:
    blocks = np.arange(len(fractions))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(blocks, fractions, color="tab:orange", label="quadratic")
    ax.bar(blocks, 1 - np.asarray(fractions), bottom=fractions, color="tab:gray", label="conventional")
    ax.set_xticks(blocks)
    ax.set_xlabel("block")
    ax.set_ylabel("fraction of nodes")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def cost_comparison(costs: Dict[str, dict], path) -> Path:
    names = list(costs)
    fig, ax = plt.subplots(figsize=(5, 3))
    x = np.arange(len(names))
    ax.bar(x - 0.2, [costs[n]["evaluations"] for n in names], 0.4, label="evaluations")
    ax.bar(x + 0.2, [costs[n]["trainings"] for n in names], 0.4, label="trainings")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    return _save(fig, path)
