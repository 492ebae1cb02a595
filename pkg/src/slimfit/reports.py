"""CSV writers and figure rendering for run artifacts.

Every CSV starts with one '#' metadata line (timestamp, seed); the body
below it is byte-identical across reruns of the same config and seed.
Figures are rendered to PNG next to the CSVs they visualize.
"""

from __future__ import annotations

import datetime
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

GIB = 1024 ** 3


def _meta_line(seed) -> str:
    ts = datetime.datetime.now().isoformat(timespec="seconds")
    return f"# generated {ts} seed={seed}\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str, header: list[str], rows, seed) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(_meta_line(seed))
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def write_run_csvs(out_dir: str, log, seed: int) -> list[str]:
    """metrics.csv, schedule.csv, heatmap.csv, memory.csv for one run."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    p = os.path.join(out_dir, "metrics.csv")
    write_csv(p, ["iteration", "loss", "accuracy", "lr"], log.metrics, seed)
    paths.append(p)

    p = os.path.join(out_dir, "schedule.csv")
    write_csv(p, ["iteration", "layer_id", "frozen", "d_i"], log.schedule, seed)
    paths.append(p)

    p = os.path.join(out_dir, "heatmap.csv")
    rows = [(lid, name, int(count)) for lid, (name, count)
            in enumerate(zip(log.layer_names, log.update_counts))]
    write_csv(p, ["layer_id", "name", "update_count"], rows, seed)
    paths.append(p)

    p = os.path.join(out_dir, "memory.csv")
    write_csv(p, ["iteration", "dynamic_bytes", "static_bytes", "total"], log.memory, seed)
    paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# figures


def plot_run(out_dir: str, log) -> list[str]:
    """Distance traces, loss/accuracy curves, memory trace, update heatmap."""
    paths = []
    iters = [m[0] for m in log.metrics]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(iters, [m[1] for m in log.metrics], lw=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("training loss")
    ax2.plot(iters, [m[2] for m in log.metrics], lw=1.0, color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("batch accuracy")
    fig.tight_layout()
    p = os.path.join(out_dir, "metrics.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    dmat = log.distance_matrix()
    if dmat.size:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        n = dmat.shape[1]
        shown = sorted(set([0, n // 4, n // 2, (3 * n) // 4, n - 1]))
        for lid in shown:
            trace = dmat[:, lid].copy()
            trace[trace >= 1e6] = np.nan   # hide warm-start inits
            ax.plot(trace, lw=1.0, label=log.layer_names[lid])
        ax.set_xlabel("iteration")
        ax.set_ylabel("distance value")
        ax.legend(fontsize=6)
        fig.tight_layout()
        p = os.path.join(out_dir, "distance_traces.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

    if log.memory:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        mi = [m[0] for m in log.memory]
        ax.plot(mi, [m[1] / GIB for m in log.memory], lw=1.0, label="dynamic")
        ax.plot(mi, [m[2] / GIB for m in log.memory], lw=1.0, label="static + semi-static")
        ax.plot(mi, [m[3] / GIB for m in log.memory], lw=1.2, label="total")
        ax.set_xlabel("iteration")
        ax.set_ylabel("cached activations (GiB)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = os.path.join(out_dir, "memory_trace.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

    counts = np.asarray(log.update_counts, dtype=float)
    if counts.size:
        cols = 8
        rows = int(np.ceil(counts.size / cols))
        grid = np.full(rows * cols, np.nan)
        grid[:counts.size] = counts
        fig, ax = plt.subplots(figsize=(6, 0.6 * rows + 1))
        im = ax.imshow(grid.reshape(rows, cols), cmap="Blues", aspect="auto")
        for lid in range(counts.size):
            ax.text(lid % cols, lid // cols, str(lid), ha="center", va="center", fontsize=6)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title("update count per layer (ids annotated)", fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        p = os.path.join(out_dir, "update_heatmap.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_sweep(out_dir: str, rows) -> str:
    """Accuracy-vs-freezing-rate trade-off, one line per scheduler."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    by_sched = {}
    for sched, rate, acc in rows:
        by_sched.setdefault(sched, []).append((rate, acc))
    markers = {"ils": "*", "random": "o", "progressive": "^", "none": "s"}
    for sched, pts in by_sched.items():
        pts.sort()
        ax.plot([p[0] * 100 for p in pts], [p[1] * 100 for p in pts],
                marker=markers.get(sched, "."), label=sched)
    ax.set_xlabel("freezing rate (%)")
    ax.set_ylabel("final accuracy (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    p = os.path.join(out_dir, "sweep_tradeoff.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p


def plot_memory_report(out_dir: str, batch_sizes, baseline_bytes, configured_bytes) -> str:
    """Grouped bars, baseline vs configured, across batch sizes."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    x = np.arange(len(batch_sizes))
    w = 0.38
    ax.bar(x - w / 2, [b / GIB for b in baseline_bytes], w, label="baseline")
    ax.bar(x + w / 2, [b / GIB for b in configured_bytes], w, label="configured")
    ax.set_xticks(x, [f"B={b}" for b in batch_sizes])
    ax.set_ylabel("activation memory (GiB)")
    ax.legend()
    fig.tight_layout()
    p = os.path.join(out_dir, "memory_breakdown.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p
