"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# deterministic PNG output: no timestamps, fixed hash salt for SVG ids
plt.rcParams["svg.hashsalt"] = "qapnet"
PNG_META = {"Software": None}

PANELS = (
    ("accuracy", 2, 3, "Accuracy"),
    ("eb", 4, 5, r"$\epsilon_b$ at $\epsilon_s=0.5$"),
    ("neff", 6, 7, r"Neural efficiency $\eta_N$"),
)


def _finish(fig, ax, path):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


def plot_bundle(tables, out_dir):
    """One figure per metric, every group as an errorbar series against BOPs.

    ``tables`` maps group name to rows in ``CURVE_COLUMNS`` order. Returns
    the relative paths written.
    """
    os.makedirs(os.path.join(out_dir, "figures"), exist_ok=True)
    written = {}
    for name, mean_col, err_col, label in PANELS:
        fig, ax = plt.subplots(figsize=(6, 4))
        for group, rows in sorted(tables.items()):
            rows = sorted(rows, key=lambda r: r[1])
            x = [r[1] for r in rows]
            ax.errorbar(x, [r[mean_col] for r in rows], yerr=[r[err_col] for r in rows],
                        marker="o", ms=3, capsize=2, label=group)
        ax.set_xscale("log")
        ax.set_xlabel("BOPs")
        ax.set_ylabel(label)
        if tables:
            ax.legend(fontsize=6)
        rel = os.path.join("figures", f"{name}_vs_bops.png")
        _finish(fig, ax, os.path.join(out_dir, rel))
        written[name] = rel
    return written


def plot_loss_curves(records, path):
    """Train/validation loss against cumulative epoch, pruning steps dotted."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs, tr, va = [], [], []
    for r in records:
        n = len(r.val_loss)
        xs.extend(range(r.epoch_offset + 1, r.epoch_offset + n + 1))
        tr.extend(r.train_loss)
        va.extend(r.val_loss)
        if r.iteration:
            ax.axvline(r.epoch_offset + 0.5, color="tab:red", ls=":", lw=0.8)
    ax.plot(xs, tr, label="train")
    ax.plot(xs, va, label="validation")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.legend()
    _finish(fig, ax, path)
    return path


def plot_roc(curves, labels, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for c, lab in zip(curves, labels):
        ax.plot(c.signal_eff, c.background_eff, label=lab)
    ax.set_yscale("log")
    ax.set_xlabel(r"Signal efficiency $\epsilon_s$")
    ax.set_ylabel(r"Background efficiency $\epsilon_b$")
    ax.legend(fontsize=7)
    _finish(fig, ax, path)
    return path
