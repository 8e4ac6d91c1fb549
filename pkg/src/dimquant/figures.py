"""Figure rendering for the report paths; headless, always writes files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_layer_errors(results, path) -> None:
    """Bar chart of per-layer reconstruction error; searched layers show
    both candidate errors with the winner marked."""
    fig, ax = plt.subplots(figsize=(8, 4))
    labels, oc_err, ic_err, final_err = [], [], [], []
    for r in results:
        labels.append(r.layer_id)
        if r.report is not None:
            oc_err.append(r.report.err_oc)
            ic_err.append(r.report.err_ic)
        else:
            oc_err.append(np.nan)
            ic_err.append(np.nan)
        final_err.append(np.nan if r.error is None else r.error)
    pos = np.arange(len(labels))
    ax.bar(pos - 0.2, oc_err, width=0.2, label="per-OC candidate")
    ax.bar(pos, ic_err, width=0.2, label="per-IC candidate")
    ax.bar(pos + 0.2, final_err, width=0.2, label="final")
    ax.set_xticks(pos, labels, rotation=30, ha="right")
    ax.set_ylabel("reconstruction error (MSE)")
    if np.isfinite(final_err).any() and np.nanmax(final_err) > 0:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_ablation(rows, path) -> None:
    """Reconstruction error per (method, mode, options) combo, one group
    of bars per layer."""
    fig, ax = plt.subplots(figsize=(9, 4))
    layers = sorted({r["layer_id"] for r in rows})
    combos = sorted({_combo_label(r) for r in rows})
    width = 0.8 / max(len(combos), 1)
    pos = np.arange(len(layers))
    for i, combo in enumerate(combos):
        errs = []
        for layer in layers:
            match = [
                r["recon_error"]
                for r in rows
                if r["layer_id"] == layer and _combo_label(r) == combo
            ]
            errs.append(match[0] if match else np.nan)
        ax.bar(pos + (i - len(combos) / 2) * width, errs, width=width, label=combo)
    ax.set_xticks(pos, layers, rotation=30, ha="right")
    ax.set_ylabel("reconstruction error (MSE)")
    if rows:
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _combo_label(row) -> str:
    label = f"{row['method']}/{row['mode']}"
    if row.get("act_order"):
        label += "+reorder"
    if row.get("static_groups"):
        label += "+static"
    return label


def plot_update_trace(trace, outlier_idx, path) -> None:
    """Per-column update magnitude with the planted outlier columns marked."""
    fig, ax = plt.subplots(figsize=(8, 3))
    mags = trace.err_mag
    ax.plot(np.arange(len(mags)), mags, lw=0.8, color="gray", label="update magnitude")
    if len(outlier_idx):
        ax.plot(outlier_idx, mags[outlier_idx], "ro", ms=4, label="outlier channels")
    ax.set_xlabel("input channel")
    ax.set_ylabel("update mass")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
