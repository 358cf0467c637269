"""Figure rendering for verify and bench reports.

Everything here draws to files through the Agg backend; nothing opens a
window. Each helper takes a finished report plus an output path and
returns the path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

from .bench import BenchReport
from .parallel import format_config_string
from .verify import VerifyReport


def bench_speedup_png(report: BenchReport, path: str) -> str:
    """Bar chart of convert speedup per (workers, inner) setting, with the
    sequential baseline drawn as a reference line at 1.0."""
    rows = report.rows[1:]  # row 0 is the baseline itself
    labels = [f"w={r.n_workers}\ni={r.inner}" for r in rows]
    speedups = [r.speedup_vs_sequential for r in rows]

    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 1.5), 3.6))
    x = np.arange(len(rows))
    bars = ax.bar(x, speedups, color="#4878cf", width=0.6)
    ax.axhline(1.0, color="#444444", linewidth=1, linestyle="--", label="sequential")
    for b, s in zip(bars, speedups):
        ax.text(
            b.get_x() + b.get_width() / 2,
            b.get_height(),
            f"{s:.2f}",
            ha="center",
            va="bottom",
            fontsize=8,
        )
    ax.set_xticks(x, labels, fontsize=8)
    ax.set_ylabel("speedup vs sequential")
    ax.set_title(
        f"convert wall-time speedup ({report.rows[0].model},"
        f" {report.rows[0].params_numel:,} elements)"
    )
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def verify_grid_png(report: VerifyReport, path: str) -> str:
    """Pass/fail heat grid: one row per model family, one column per
    (src, tgt, seed, steps) combination."""
    col_keys: list[tuple] = []
    row_keys: list[str] = []
    for r in report.results:
        c = r.cell
        ck = (c.src, c.tgt, c.seed, c.steps, c.resume_steps)
        if ck not in col_keys:
            col_keys.append(ck)
        rk = f"{c.family}({','.join(f'{k}={v}' for k, v in c.scale)})"
        if rk not in row_keys:
            row_keys.append(rk)

    grid = np.full((len(row_keys), len(col_keys)), np.nan)
    for r in report.results:
        c = r.cell
        i = row_keys.index(f"{c.family}({','.join(f'{k}={v}' for k, v in c.scale)})")
        j = col_keys.index((c.src, c.tgt, c.seed, c.steps, c.resume_steps))
        grid[i, j] = 1.0 if r.ok else 0.0

    def col_label(ck) -> str:
        src, tgt, seed, _, resume_steps = ck
        s = format_config_string(src)
        t = format_config_string(tgt)
        lab = s if s == t else f"{s}>{t}"
        if resume_steps:
            lab += " +resume"
        return lab

    fig, ax = plt.subplots(
        figsize=(max(6.0, 0.32 * len(col_keys) + 2.0), 2.4 + 0.6 * len(row_keys))
    )
    cmap = ListedColormap(["#d64541", "#3fa45b"])  # fail, pass
    masked = np.ma.masked_invalid(grid)
    ax.imshow(masked, cmap=cmap, vmin=0, vmax=1, aspect="auto")
    ax.set_yticks(range(len(row_keys)), row_keys, fontsize=8)
    ax.set_xticks(
        range(len(col_keys)),
        [col_label(ck) for ck in col_keys],
        rotation=90,
        fontsize=5,
    )
    n_pass = sum(1 for r in report.results if r.ok)
    ax.set_title(f"round-trip grid: {n_pass}/{len(report.results)} cells pass", fontsize=10)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
