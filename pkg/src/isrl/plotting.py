"""Figures for experiment CSVs (rendered with matplotlib's non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata carries a software/version stamp by default; drop it for stable files
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _stats(rows):
    """``{cell: (mode, p_l, lambda, mean, std)}`` from the aggregate rows, in CSV order."""
    means = {r["cell"]: r for r in rows if str(r["seed"]) == "mean" and r["acc"] != ""}
    stds = {r["cell"]: r for r in rows if str(r["seed"]) == "std" and r["acc"] != ""}
    out = {}
    for cell, r in means.items():
        out[cell] = (r["mode"], float(r["p_l"]), float(r["lambda"]), float(r["acc"]),
                     float(stds[cell]["acc"]) if cell in stds else 0.0)
    return out


def bar_figure(rows, title: str):
    stats = _stats(rows)
    labels = list(stats)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 3.2))
    ax.bar(range(len(labels)), [stats[c][3] for c in labels], yerr=[stats[c][4] for c in labels],
           capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    fig.tight_layout()
    return fig


def flip_figure(rows, title: str = "flip-sweep"):
    stats = _stats(rows)
    modes = list(dict.fromkeys(s[0] for s in stats.values()))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for mode in modes:
        pts = sorted((s[1], s[3], s[4]) for s in stats.values() if s[0] == mode)
        x, y, e = zip(*pts)
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=mode)
    ax.set_xlabel("label flip probability $p_l$")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    return fig


def penalty_figure(rows, title: str = "penalty-sweep"):
    stats = _stats(rows)
    pts = sorted((s[2], s[3], s[4]) for s in stats.values())
    x, y, e = zip(*pts)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(x, y, yerr=e, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("penalty weight $\\lambda$")
    ax.set_ylabel("test accuracy (%)")
    ax.set_title(title)
    fig.tight_layout()
    return fig


_FIGURES = {"flip-sweep": flip_figure, "penalty-sweep": penalty_figure}


def render(rows, name: str, out_dir) -> Path:
    """Write ``<out_dir>/<name>.png`` for an experiment's CSV rows."""
    maker = _FIGURES.get(name)
    fig = maker(rows, name) if maker else bar_figure(rows, name)
    path = Path(out_dir) / f"{name}.png"
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


__all__ = ["render", "bar_figure", "flip_figure", "penalty_figure"]
