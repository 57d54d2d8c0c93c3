"""Static SVG figures for experiment reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "carbonlace"
_SAVE = {"format": "svg", "metadata": {"Date": None}}


def box_panels(groups: dict[str, dict[str, np.ndarray]], path, ylabel: str, title: str = "") -> None:
    """Side-by-side box plots: one panel per statistic, one box per model.

    ``groups`` maps a panel name (e.g. "max") to ``{model: values}``.
    Whiskers extend to 1.5 IQR and points beyond are drawn as outliers.
    """
    fig, axes = plt.subplots(1, len(groups), figsize=(4.2 * len(groups), 3.6), squeeze=False)
    for ax, (panel, data) in zip(axes[0], groups.items()):
        names = list(data)
        ax.boxplot([np.asarray(data[n]) for n in names], whis=1.5, flierprops={"markersize": 3})
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_title(panel)
        ax.set_ylabel(ylabel)
        ax.grid(axis="y", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def histogram_grid(hist_rows, path, title: str = "") -> None:
    """One histogram per method from ``(method, bin_lo, bin_hi, count)`` rows."""
    methods: list[str] = []
    for r in hist_rows:
        if r[0] not in methods:
            methods.append(r[0])
    n = max(1, len(methods))
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False, sharey=True)
    for ax, m in zip(axes[0], methods):
        rows = [r for r in hist_rows if r[0] == m]
        lo = np.array([r[1] for r in rows])
        hi = np.array([r[2] for r in rows])
        cnt = np.array([r[3] for r in rows])
        ax.bar(lo, cnt, width=hi - lo, align="edge", color="0.55", edgecolor="0.2", linewidth=0.4)
        ax.axvline(0.0, color="k", linewidth=0.8, linestyle="--")
        ax.set_title(m)
        ax.set_xlabel("ΔE (tCO2e/h)")
    axes[0][0].set_ylabel("profiles")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def loss_curves(rows, path, title: str = "") -> None:
    """Per-epoch loss components from a training log."""
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    labels = ["L_lambda", "L_mu", "L", "L_bd", "L_d", "total"]
    for k, lab in enumerate(labels):
        y = rows[:, 2 + k]
        if np.any(y > 0):
            ax.semilogy(rows[:, 1], np.maximum(y, 1e-12), label=lab, linewidth=1.0)
    for e in rows[np.flatnonzero(np.diff(rows[:, 0])) + 1, 1]:
        ax.axvline(e, color="0.6", linewidth=0.6, linestyle=":")
    ax.set_xlabel("epoch")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def jacobian_heatmap(J: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    v = float(np.max(np.abs(J))) or 1.0
    im = ax.imshow(J, cmap="RdBu_r", vmin=-v, vmax=v)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("load j")
    ax.set_ylabel("output i")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
