"""Static SVG figures: route maps, logit heatmaps and learning curves."""
from __future__ import annotations

import csv
import io
import math

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "asap-routing"  # stable element ids across runs
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402


def save_figure(fig, path, fmt: str = "svg") -> None:
    buf = io.BytesIO()
    meta = {"Date": None} if fmt in ("svg", "pdf") else None
    fig.savefig(buf, format=fmt, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def render_routes(instance, solution, title: str = ""):
    """Depot as a square, customers sized by demand and labelled with end-time, one polyline per tour."""
    fig, ax = plt.subplots(figsize=(6.5, 6.5))
    xy = instance.coords
    ax.scatter(xy[1:, 0], xy[1:, 1], s=20 + 400 * instance.demand[1:], c="0.35", zorder=3, gid="customers")
    ax.scatter(xy[:1, 0], xy[:1, 1], s=140, marker="s", c="crimson", zorder=4, gid="depot")
    for n in range(1, instance.num_nodes):
        ax.annotate(f"{instance.end_times[n]:.0f}", xy[n], textcoords="offset points", xytext=(4, 4), fontsize=7)
    colors = plt.cm.tab10(np.linspace(0, 1, 10))
    for i, tour in enumerate(solution.tours):
        pts = xy[list(tour)]
        ax.plot(pts[:, 0], pts[:, 1], "-", lw=1.6, color=colors[i % 10], zorder=2, gid=f"tour-{i}",
                label=f"tour {i + 1}")
    head = f"{title}  " if title else ""
    ax.set_title(f"{head}total distance {solution.total_distance:.3f}")
    ax.set_xlim(-0.03, 1.03)
    ax.set_ylim(-0.03, 1.03)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if solution.tours:
        ax.legend(loc="upper right", fontsize=7, frameon=False)
    return fig


def render_heatmap(logits, actions=None, title: str = "pointer logits"):
    """Node x step grid of logits; masked (None / -inf) cells left blank, chosen nodes circled."""
    arr = np.array([[np.nan if (v is None or not math.isfinite(v)) else v for v in row] for row in logits],
                   dtype=float)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * arr.shape[0] + 2), max(3.0, 0.35 * arr.shape[1] + 1.5)))
    im = ax.imshow(arr.T, aspect="auto", origin="lower", cmap="viridis", interpolation="nearest", gid="heatmap")
    if actions is not None:
        ax.scatter(np.arange(len(actions)), actions, s=30, facecolors="none", edgecolors="red", gid="chosen")
    ax.set_xlabel("step")
    ax.set_ylabel("node")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="logit")
    return fig


def render_learning_curve(metrics_csv, eval_csv=None):
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    if rows:
        upd = [int(r["update"]) for r in rows]
        ax1.plot(upd, [-float(r["mean_return"]) for r in rows], lw=1, label="rollout objective")
        ax2.plot(upd, [float(r["policy_loss"]) for r in rows], lw=1, label="policy loss")
        ax2.plot(upd, [float(r["value_loss"]) for r in rows], lw=1, label="value loss")
    if eval_csv is not None:
        with open(eval_csv, newline="") as fh:
            ev = list(csv.DictReader(fh))
        if ev:
            ax1.plot([int(r["update"]) for r in ev], [float(r["mean_objective"]) for r in ev], "o-",
                     label="eval (best of POMO)")
    ax1.set_xlabel("update")
    ax1.set_ylabel("objective")
    ax1.legend(frameon=False, fontsize=8)
    ax2.set_xlabel("update")
    ax2.set_yscale("symlog")
    ax2.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return fig


def render_benchmark(rows):
    """Grouped bars of objective per instance and solver."""
    inst_ids = sorted({r["instance_id"] for r in rows})
    solvers = list(dict.fromkeys(r["solver"] for r in rows))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.8 * len(inst_ids) * len(solvers)), 3.8))
    width = 0.8 / max(1, len(solvers))
    for j, s in enumerate(solvers):
        vals = []
        for i in inst_ids:
            match = [r for r in rows if r["instance_id"] == i and r["solver"] == s and r["status"] == "ok"]
            vals.append(match[0]["objective"] if match else np.nan)
        ax.bar(np.arange(len(inst_ids)) + j * width, vals, width, label=s)
    ax.set_xticks(np.arange(len(inst_ids)) + 0.4 - width / 2)
    ax.set_xticklabels(inst_ids, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("objective")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return fig
