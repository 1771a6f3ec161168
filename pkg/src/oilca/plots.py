"""PNG figures rendered next to the report CSVs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
PALETTE = ["#0072B2", "#D55E00", "#009E73", "#CC79A7", "#E69F00", "#56B4E9"]
FIGSIZE = (4.0, 3.0)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout(pad=0.3)
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
    return path


def method_bars(methods, means, errs, path, title="Mean return over seeds"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        x = np.arange(len(methods))
        ax.bar(x, means, yerr=errs, color=PALETTE[: len(methods)], capsize=3)
        ax.set_xticks(x, methods)
        ax.set_ylabel("return")
        ax.set_title(title)
        return _save(fig, path)


def ratio_curve(ratios, means, errs, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.errorbar(ratios, means, yerr=errs, marker="o", color=PALETTE[0], capsize=3)
        ax.set_xlabel("|D_E| / |D_U| (%)")
        ax.set_ylabel("return")
        return _save(fig, path)


def latent_scatter(rows, path):
    """``rows`` are ``(source, class, dim1, dim2)``; one panel per source."""
    sources = list(dict.fromkeys(r[0] for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(sources), figsize=(3.0 * len(sources), 3.0), squeeze=False)
        for ax, source in zip(axes[0], sources):
            pts = [r for r in rows if r[0] == source]
            for c in sorted({r[1] for r in pts}):
                xy = np.array([(r[2], r[3]) for r in pts if r[1] == c])
                ax.scatter(xy[:, 0], xy[:, 1], s=3, alpha=0.5, color=PALETTE[c % len(PALETTE)], label=f"c={c}")
            ax.set_title(source)
        axes[0][0].legend(markerscale=3, frameon=False)
        return _save(fig, path)


def loss_curves(rows, path):
    """``rows`` are ``(step, loss, component)``; one line per component."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for i, comp in enumerate(dict.fromkeys(r[2] for r in rows)):
            pts = np.array([(r[0], r[1]) for r in rows if r[2] == comp])
            ax.plot(pts[:, 0], pts[:, 1], lw=0.8, color=PALETTE[i % len(PALETTE)], label=comp)
        ax.set_xlabel("step")
        ax.legend(frameon=False)
        return _save(fig, path)
