"""Report figures rendered to files next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": "atlasmatch"}  # fixed metadata keeps PNG bytes reproducible


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def training_curves(history, path) -> None:
    """Loss per iteration plus validation MAE checkpoints on a twin axis."""
    iters = [r.iteration for r in history if r.loss == r.loss]  # drop NaN rows
    losses = [r.loss for r in history if r.loss == r.loss]
    val_pts = [(r.iteration, r.val_mae) for r in history if r.val_mae is not None]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, losses, lw=0.7, color="tab:blue", label="training loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss", color="tab:blue")
    if val_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val_pts), "o-", color="tab:red", ms=4, label="validation MAE")
        ax2.set_ylabel("validation MAE", color="tab:red")
    ax.set_title("training progress")
    fig.tight_layout()
    _save(fig, path)


def rank_histogram(ranks: Sequence[int], num_plates: int, path) -> None:
    """Distribution of ground-truth ranks over the evaluated queries."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    upper = max(10, min(num_plates, max(ranks) + 2 if ranks else 10))
    ax.hist(ranks, bins=range(upper + 1), color="tab:blue", edgecolor="white")
    ax.set_xlabel("ground-truth rank (0 = best)")
    ax.set_ylabel("queries")
    ax.set_title("rank distribution")
    fig.tight_layout()
    _save(fig, path)


def mi_traces(traces: Sequence[Sequence[float]], path) -> None:
    """Best-so-far sampled MI per iteration, one line per pyramid level."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for level, trace in enumerate(traces):
        ax.plot(trace, lw=0.9, label=f"level {len(traces) - 1 - level}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("best MI so far (nats)")
    ax.set_title("registration progress (coarse to fine)")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def search_trials(log: Sequence[dict], path) -> None:
    """Final MI per random-search trial with the running best overlaid."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    scores = [entry["final_mi"] for entry in log]
    best = []
    cur = float("-inf")
    for s in scores:
        cur = max(cur, s)
        best.append(cur)
    ax.plot(scores, "o", ms=4, color="tab:blue", label="trial MI")
    ax.plot(best, "-", color="tab:red", label="best so far")
    ax.set_xlabel("trial")
    ax.set_ylabel("final MI (nats)")
    ax.set_title("random hyperparameter search")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
