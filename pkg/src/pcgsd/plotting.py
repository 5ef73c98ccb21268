"""Figures for sweep and benchmark reports, written next to the CSV/JSON output."""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}


def new_figure(width: float = 4.5, ncols: int = 1):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, width * GOLDEN), squeeze=False)
    return fig, axes[0]


def save(fig, path) -> None:
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def _mean_by(rows, key, col):
    acc = defaultdict(list)
    for r in rows:
        if r[col] is not None and not (isinstance(r[col], float) and math.isnan(r[col])):
            acc[r[key]].append(r[col])
    xs = sorted(acc)
    return xs, [sum(acc[x]) / len(acc[x]) for x in xs]


def plot_theta_sweep(rows, path) -> None:
    """Acceptance and modeled speedup against theta, with the SSD group TV."""
    fig, (ax, ax_tv) = new_figure(ncols=2)
    with plt.rc_context(STYLE):
        xs, acc = _mean_by(rows, "theta", "acceptance_rate")
        ax.plot(xs, acc, "o-", label="acceptance")
        xs, sp = _mean_by(rows, "theta", "modeled_speedup")
        ax.plot(xs, sp, "s--", label="modeled speedup")
        ax.set_xlabel(r"similarity threshold $\theta$")
        ax.invert_xaxis()
        ax.legend()
        xs, tv = _mean_by(rows, "theta", "ssd_coarse_tv")
        ax_tv.plot(xs, tv, "o-", color="C3")
        ax_tv.set_xlabel(r"similarity threshold $\theta$")
        ax_tv.set_ylabel("SSD group TV to target")
        ax_tv.invert_xaxis()
    save(fig, path)


def plot_lookahead_sweep(rows, path) -> None:
    fig, (ax,) = new_figure()
    with plt.rc_context(STYLE):
        xs, sp = _mean_by(rows, "lookahead", "modeled_speedup")
        ax.plot(xs, sp, "o-", label="simulated")
        xs, cf = _mean_by(rows, "lookahead", "closed_form_speedup")
        ax.plot(xs, cf, "k:", label="closed form")
        ax.set_xlabel("lookahead (drafted tokens per round)")
        ax.set_ylabel("modeled speedup")
        ax.legend()
    save(fig, path)


def plot_bench(summary, path) -> None:
    methods = list(summary["methods"])
    fig, (ax_acc, ax_sp) = new_figure(ncols=2)
    with plt.rc_context(STYLE):
        acc = [summary["methods"][m]["acceptance_rate"] or 0.0 for m in methods]
        sp = [summary["methods"][m]["modeled_speedup"] for m in methods]
        ax_acc.bar(methods, acc, color="C0")
        ax_acc.set_ylabel("acceptance rate")
        ax_acc.set_ylim(0, 1.05)
        ax_sp.bar(methods, sp, color="C1")
        ax_sp.set_ylabel("modeled speedup")
        ax_sp.axhline(1.0, color="k", lw=0.8, ls=":")
    save(fig, path)
