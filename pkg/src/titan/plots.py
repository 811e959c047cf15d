"""Static SVG figures. Every file carries its generating config in the SVG
``Description`` metadata."""

from __future__ import annotations

import json
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path, config: Mapping | None):
    meta = {"Description": json.dumps(config, sort_keys=True, default=str)} if config is not None else {}
    meta["Date"] = None  # keep files reproducible
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)


def symmetric_limit(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    m = float(np.max(np.abs(v))) if v.size else 0.0
    return m if m > 0 else 1.0


def heatmap(grid, row_labels, col_labels, title, cbar_label, path, config=None, clip=None):
    """Diverging heatmap with the colour scale symmetric about zero (zero maps
    to the neutral midpoint). ``clip`` caps the scale at +/- clip."""
    grid = np.asarray(grid, dtype=float)
    lim = symmetric_limit(grid) if clip is None else float(clip)
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * grid.shape[1], 1.2 + 0.5 * grid.shape[0]))
    im = ax.imshow(np.clip(grid, -lim, lim), cmap="PiYG", vmin=-lim, vmax=lim, origin="lower", aspect="auto")
    ax.set_xticks(range(len(col_labels)), [str(c) for c in col_labels])
    ax.set_yticks(range(len(row_labels)), [str(r) for r in row_labels])
    for (i, j), v in np.ndenumerate(grid):
        if np.isfinite(v):
            ax.text(j, i, f"{v:+.3f}", ha="center", va="center", fontsize=7)
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, label=cbar_label)
    fig.tight_layout()
    _save(fig, path, config)
    return im


def intensity_image(grid, title, path, config=None):
    """Grey-scale intensity grid; darker cells were frozen more often."""
    grid = np.asarray(grid, dtype=float)
    fig, ax = plt.subplots(figsize=(1.5 + 0.3 * grid.shape[1], 1.2 + 0.3 * grid.shape[0]))
    im = ax.imshow(grid, cmap="Greys", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xlabel("column q*D + d")
    ax.set_ylabel("layer")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, label="freeze intensity")
    fig.tight_layout()
    _save(fig, path, config)


def curves(series: Mapping[str, tuple[np.ndarray, np.ndarray]], ylabel, title, path, config=None, log_y=False):
    """Mean lines with +/- std envelopes, one per strategy."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (mean, std) in series.items():
        t = np.arange(len(mean))
        ax.plot(t, mean, label=name)
        ax.fill_between(t, mean - std, mean + std, alpha=0.25)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    ax.legend()
    fig.tight_layout()
    _save(fig, path, config)


def variance_plot(rows_by_scheme: Mapping[str, Sequence], path, config=None):
    fig, ax = plt.subplots(figsize=(5, 4))
    for scheme, rows in rows_by_scheme.items():
        L = np.array([r.L for r in rows])
        v = np.array([r.variance for r in rows])
        lo = np.array([r.ci_low for r in rows])
        hi = np.array([r.ci_high for r in rows])
        ax.errorbar(L, v, yerr=[v - lo, hi - v], marker="o", capsize=3, label=scheme)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("layers L")
    ax.set_ylabel("Var[dE/dtheta]")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, config)
