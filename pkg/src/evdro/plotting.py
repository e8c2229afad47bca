"""Report figures: per-step policy traces and paired per-seed differences."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = {
    "jd_realized": "balancing distance",
    "unfair_ratio": "supply-demand ratio unfairness",
    "unfair_util": "charging utilization unfairness",
}
COLORS = {"Robust": "#1b6ca8", "NonRobust": "#d1495b", "NoOp": "#7a7a7a"}
STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def traces(rows):
    """policy -> metric -> (n_seeds, steps) array, from metric CSV rows (strings or values)."""
    by = {}
    for step, policy, seed, jd, ur, uu, *_ in rows:
        d = by.setdefault(policy, {}).setdefault(int(seed), {})
        d[int(step)] = (float(jd), float(ur), float(uu))
    out = {}
    for policy, seeds in by.items():
        steps = max(len(v) for v in seeds.values())
        arr = np.full((len(seeds), steps, 3), np.nan)
        for j, s in enumerate(sorted(seeds)):
            for k, vals in seeds[s].items():
                arr[j, k] = vals
        out[policy] = {m: arr[:, :, i] for i, m in enumerate(METRICS)}
    return out


def plot_traces(tr, metric, path, step_minutes=30.0, start_hour=0.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for policy, mets in tr.items():
            arr = mets[metric]
            hours = start_hour + np.arange(arr.shape[1]) * step_minutes / 60.0
            mean = np.nanmean(arr, axis=0)
            ax.plot(hours, mean, label=policy, color=COLORS.get(policy), lw=1.4)
            if arr.shape[0] > 1:
                lo, hi = np.nanpercentile(arr, [25, 75], axis=0)
                ax.fill_between(hours, lo, hi, color=COLORS.get(policy), alpha=0.15, lw=0)
        ax.set_xlabel("hour of day")
        ax.set_ylabel(METRICS[metric])
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})  # no version stamp, so reruns give equal bytes
        plt.close(fig)
    return Path(path)


def plot_paired(tr, baseline, path):
    """Per-seed total of each metric minus the baseline policy's total."""
    others = [p for p in tr if p != baseline]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(METRICS), figsize=(8.0, 3.0))
        for ax, metric in zip(axes, METRICS):
            base = np.nansum(tr[baseline][metric], axis=1)
            data = [np.nansum(tr[p][metric], axis=1) - base for p in others]
            if data:
                ax.boxplot(data)
                ax.set_xticks(range(1, len(others) + 1), others)
            ax.axhline(0.0, color="k", lw=0.8)
            ax.set_title(METRICS[metric], fontsize=8)
        axes[0].set_ylabel(f"paired difference vs {baseline}")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)


def render_report(rows, outdir, baseline="NonRobust", step_minutes=30.0):
    """Write the three trace figures plus the paired-difference panel; return their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tr = traces(rows)
    paths = [plot_traces(tr, m, outdir / f"fig_{m}.png", step_minutes) for m in METRICS]
    if baseline in tr and len(tr) > 1:
        paths.append(plot_paired(tr, baseline, outdir / "fig_paired_differences.png"))
    return paths
