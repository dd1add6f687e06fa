"""Static SVG renderings of a finished run.

Everything is reconstructed from the run directory's CSVs and
run_meta.json, so figures can be re-emitted without the training objects.
Dates are stripped from the SVG metadata to keep reruns byte-stable.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .flow import load_trajectories_csv
from .policy import ConfigError

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def _snapshot_steps(N: int) -> list[int]:
    ks = {0, N, round(N / 4), round(N / 2), round(3 * N / 4)}
    return sorted(int(k) for k in ks)


def _target_grid_logpdf(meta: dict, xs, ys):
    """Log-density of the stored target on a plot grid (2-D state only)."""
    from .distributions import GaussianSpec, GmmSpec

    t = meta["target"]
    if t["kind"] == "gaussian":
        d = GaussianSpec(np.array(t["mean"]), np.array(t["cov"]))
    else:
        comps = [GaussianSpec(np.array(m), np.array(c))
                 for m, c in zip(t["means"], t["covs"])]
        d = GmmSpec(np.array(t["weights"]), comps)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return np.asarray(d.log_pdf(pts)).reshape(X.shape)


def _draw_obstacles(ax, meta: dict):
    for ob in meta.get("obstacles", []):
        cx, cy = ob["center"][0], ob["center"][1]
        for scale, alpha in ((1.0, 0.8), (2.0, 0.3)):
            ax.add_patch(plt.Circle((cx, cy), ob["radius"] * scale,
                                    fill=False, color="crimson", alpha=alpha,
                                    linewidth=1.2))


def emit_figures(run_dir) -> dict:
    """Scatter snapshots at k in {0, N/4, N/2, 3N/4, N} plus the convergence
    curve (with the benchmark level when a benchmark.csv is present)."""
    run_dir = Path(run_dir)
    traj_path = run_dir / "trajectories.csv"
    conv_path = run_dir / "convergence.csv"
    meta_path = run_dir / "run_meta.json"
    for p in (traj_path, conv_path, meta_path):
        if not p.exists():
            raise ConfigError(f"emit-figures: missing input {p}")
    meta = json.loads(meta_path.read_text())
    states, _, _ = load_trajectories_csv(traj_path)
    N = states.shape[0] - 1
    out = {}

    lims = None
    if meta.get("is_2d") and "target" in meta:
        all_xy = states[..., :2].reshape(-1, 2)
        lo = all_xy.min(axis=0) - 1.0
        hi = all_xy.max(axis=0) + 1.0
        lims = (lo, hi)
        xs = np.linspace(lo[0], hi[0], 160)
        ys = np.linspace(lo[1], hi[1], 160)
        logp = _target_grid_logpdf(meta, xs, ys)

    for k in _snapshot_steps(N):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        if lims is not None:
            levels = np.quantile(logp, [0.82, 0.9, 0.96, 0.99])
            ax.contour(xs, ys, logp, levels=levels, colors="gray",
                       linewidths=0.8, alpha=0.8)
        ax.scatter(states[k, :, 0], states[k, :, 1], s=4, alpha=0.5,
                   color="tab:blue")
        _draw_obstacles(ax, meta)
        ax.set_title(f"{meta['experiment']}: states at k = {k}")
        ax.set_xlabel("state 1")
        ax.set_ylabel("state 2")
        ax.set_aspect("equal", adjustable="datalim")
        fig.tight_layout()
        path = run_dir / f"snapshot_k{k:03d}.svg"
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
        out[f"figure_k{k:03d}"] = path

    steps, totals = [], []
    with open(conv_path, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            totals.append(float(row["total"]))
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.plot(steps, totals, color="tab:blue", label="training loss")
    bench_path = run_dir / "benchmark.csv"
    if bench_path.exists():
        with open(bench_path, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            cost = float(rows[0]["cost"])
            ax.axhline(cost, color="tab:orange", linestyle="--",
                       label="affine benchmark")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_title(f"{meta['experiment']}: convergence")
    ax.legend()
    fig.tight_layout()
    conv_fig = run_dir / "convergence.svg"
    fig.savefig(conv_fig, **_SAVE_KW)
    plt.close(fig)
    out["figure_convergence"] = conv_fig
    return out
