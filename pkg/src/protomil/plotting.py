"""Report figures for cross-validation runs (written next to metrics.txt)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

# no software/version stamp so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    return path


def plot_cv_curves(summary, path) -> Path:
    """Validation C-index per epoch for every fold; the selected epoch is marked."""
    fig = Figure(figsize=(6.0, 3.6))
    ax = fig.add_subplot()
    for f in summary.folds:
        curve = f.val_c_index_curve
        line, = ax.plot(range(len(curve)), curve, lw=1.2, label=f"fold {f.fold_id}")
        ax.plot([f.best_epoch], [curve[f.best_epoch]], "o", color=line.get_color(), ms=5)
    ax.axhline(0.5, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation C-index")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(f"C-index (best +/- 1) {summary.mean:.3f} +/- {summary.std:.3f}", fontsize=10)
    ax.legend(fontsize=8, frameon=False, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(summary, path) -> Path:
    fig = Figure(figsize=(6.0, 3.6))
    ax = fig.add_subplot()
    for f in summary.folds:
        ax.plot(f.train_loss_curve, lw=1.2, label=f"fold {f.fold_id} train")
        ax.plot(f.val_nll_curve, lw=0.8, ls=":", color=ax.lines[-1].get_color())
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (solid: train composite, dotted: val NLL)")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return _save(fig, path)
