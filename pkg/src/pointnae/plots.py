"""Figures for sweep reports, written next to the CSV/JSON output."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no version string or timestamps in the PNG, so reruns are byte-identical
_PNG_META = {"Software": None}

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _finite(v):
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def plot_robustness(rows: Sequence[Dict], path) -> Path:
    """Mean point error against true centres before/after refinement, per jitter level."""
    rows = [r for r in rows if _finite(r["mean_err_after"])]
    betas = [r["beta"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(betas, [r["mean_err_before"] for r in rows], "o--", color="0.45", label="annotated")
        ax.plot(betas, [r["mean_err_after"] for r in rows], "o-", color="C3", label="refined")
        for r in rows:
            if _finite(r["improvement_ratio"]):
                ax.annotate(f"{100 * r['improvement_ratio']:.0f}%", (r["beta"], r["mean_err_after"]),
                            textcoords="offset points", xytext=(0, -12), ha="center", fontsize=7)
        ax.set_xlabel(r"jitter magnitude ($\beta \cdot d$)")
        ax.set_ylabel("mean error to true centre [px]")
        ax.set_xticks(betas)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)


def plot_alpha(rows: Sequence[Dict], path) -> Path:
    """Refined error per sampling-area alpha; the annotated error is drawn as a line."""
    labels = [f"{r['alpha']:g}" for r in rows]
    after = [r["mean_err_after"] if _finite(r["mean_err_after"]) else 0.0 for r in rows]
    colors = ["C1" if r["alpha"] > 0.5 else "C0" for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        ax.bar(labels, after, color=colors, width=0.6)
        before = [r["mean_err_before"] for r in rows if _finite(r["mean_err_before"])]
        if before:
            ax.axhline(before[0], color="0.3", ls="--", lw=1, label="annotated")
            ax.legend(loc="lower right")
        ax.set_xlabel(r"$\alpha$")
        ax.set_ylabel("mean refined error [px]")
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)
