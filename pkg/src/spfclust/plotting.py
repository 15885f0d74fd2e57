"""SVG figures for fitted cluster curves and chain traces."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .laplace import LatentSummary  # noqa: E402

# stable ids and no timestamp so repeated runs write identical files
_SVG_META = {"Date": None}
matplotlib.rcParams["svg.hashsalt"] = "spfclust"


def plot_cluster_curves(path: str | Path, summaries: Mapping[int, LatentSummary],
                        observed: Mapping[int, np.ndarray], relative_risk: bool = True,
                        time_labels: Sequence | None = None) -> None:
    """One panel per cluster: observed region curves in gray, posterior mean in red with a 90% band."""
    clusters = sorted(summaries)
    k = len(clusters)
    ncol = min(4, k)
    nrow = math.ceil(k / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.6 * nrow), squeeze=False, sharex=True)
    for ax in axes.ravel()[k:]:
        ax.set_visible(False)
    for ax, c in zip(axes.ravel(), clusters):
        s = summaries[c]
        t = np.arange(s.time.size)
        obs = observed.get(c)
        if obs is not None:
            for row in np.atleast_2d(obs):
                ax.plot(t, row, color="0.65", lw=0.6)
        mean, lo, hi = (s.rr_mean, s.rr_q05, s.rr_q95) if relative_risk else (s.h_mean, s.h_q05, s.h_q95)
        ax.fill_between(t, lo, hi, color="tab:red", alpha=0.25, lw=0)
        ax.plot(t, mean, color="tab:red", lw=1.4)
        n_reg = 0 if obs is None else np.atleast_2d(obs).shape[0]
        ax.set_title(f"cluster {c} ({n_reg} regions)", fontsize=9)
        ax.tick_params(labelsize=7)
    fig.supylabel("relative risk" if relative_risk else "h(t)", fontsize=9)
    fig.supxlabel("time index", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_trace(path: str | Path, iters: np.ndarray, log_marginal: np.ndarray, n_clusters: np.ndarray,
               burn_in: int | None = None) -> None:
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    a1.plot(iters, log_marginal, lw=0.8, color="tab:blue")
    a1.set_ylabel("log marginal", fontsize=9)
    a2.step(iters, n_clusters, where="post", lw=0.8, color="tab:green")
    a2.set_ylabel("clusters", fontsize=9)
    a2.set_xlabel("iteration", fontsize=9)
    if burn_in:
        for ax in (a1, a2):
            ax.axvline(burn_in, color="0.5", ls="--", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
