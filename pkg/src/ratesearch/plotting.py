"""Report figures rendered next to the CSV output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "figure.figsize": (6.4, 4.0),
    "savefig.bbox": "tight",
    "axes.grid": True,
    "grid.color": "lightgray",
    "grid.linewidth": 0.5,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.markersize": 5,
}

NAIVE_COLOR = "tab:red"
SEARCH_COLOR = "tab:blue"
POST_COLOR = "tab:green"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _targets(rows):
    return sorted({r["target_kbps"] for r in rows})


def plot_rate_quality_scatter(rows: Sequence[dict], path) -> Path:
    """PSNR-HVS against achieved rate: single plain encode vs searched selection."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        naive = [(r["naive_kbps"], r["naive_psnr_hvs"]) for r in rows if r.get("naive_kbps") is not None]
        chosen = [(r["selected_kbps"], r["psnr_hvs"]) for r in rows if r.get("selected_kbps") is not None]
        post = [
            (r["selected_kbps"], r["postprocessed_psnr_hvs"])
            for r in rows
            if r.get("selected_kbps") is not None and r.get("postprocessed_psnr_hvs") is not None
        ]
        if naive:
            ax.scatter(*zip(*naive), color=NAIVE_COLOR, label="plain CBR encode", marker="o")
        if chosen:
            ax.scatter(*zip(*chosen), color=SEARCH_COLOR, label="searched representation", marker="s")
        if post:
            ax.scatter(*zip(*post), color=POST_COLOR, label="post-processed", marker="^")
        for t in _targets(rows):
            ax.axvline(t, color="black", linestyle="--", linewidth=0.8)
        ax.set_xscale("log")
        ax.set_xlabel("achieved rate [kb/s]")
        ax.set_ylabel("PSNR-HVS [dB]")
        if naive or chosen:
            ax.legend(loc="lower right")
        return _save(fig, path)


def plot_rate_compliance(rows: Sequence[dict], path) -> Path:
    """Achieved / target ratio per clip for each target."""
    targets = _targets(rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(targets)), squeeze=False, sharey=True)
        for ax, t in zip(axes[0], targets):
            sub = [r for r in rows if r["target_kbps"] == t]
            xs = range(len(sub))
            ax.plot(xs, [(r["naive_kbps"] or float("nan")) / t for r in sub], "o", color=NAIVE_COLOR, label="plain")
            ax.plot(xs, [(r["selected_kbps"] or float("nan")) / t for r in sub], "s", color=SEARCH_COLOR, label="searched")
            ax.axhline(1.0, color="black", linestyle="--", linewidth=0.8)
            ax.set_title(f"target {t:g} kb/s")
            ax.set_xticks(list(xs))
            ax.set_xticklabels([str(r["clip"]) for r in sub], rotation=60, ha="right")
        axes[0][0].set_ylabel("achieved / target")
        axes[0][0].legend(loc="upper right")
        return _save(fig, path)


def plot_search_trace(outcome_dict: dict, path) -> Path:
    """Requested and achieved rate for every attempt, in search order."""
    attempts = outcome_dict["attempts"]
    target = outcome_dict["target_kbps"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(attempts))
        ax.plot(xs, [a["requested_kbps"] for a in attempts], "o-", color="gray", label="requested", linewidth=0.8)
        achieved = [(i, a["achieved_kbps"]) for i, a in enumerate(attempts) if a["achieved_kbps"] is not None]
        if achieved:
            ax.plot(*zip(*achieved), "s", color=SEARCH_COLOR, label="achieved")
        sel = outcome_dict.get("selected")
        if sel is not None:
            ax.plot([sel], [attempts[sel]["achieved_kbps"]], "*", color=POST_COLOR, markersize=14, label="selected")
        ax.axhline(target, color="black", linestyle="--", linewidth=0.8)
        # Mark where each (spatial, temporal) scale starts.
        prev = None
        for i, a in enumerate(attempts):
            scale = (a["spatial_factor"], a["temporal_factor"])
            if scale != prev:
                ax.axvline(i - 0.5, color="lightgray", linewidth=0.8)
                ax.annotate(f"{scale[0]}x t{scale[1]}", (i - 0.4, 1.0), xycoords=("data", "axes fraction"),
                            va="top", fontsize=7)
                prev = scale
        ax.set_xlabel("encoder invocation")
        ax.set_ylabel("rate [kb/s]")
        ax.legend(loc="upper right")
        return _save(fig, path)
