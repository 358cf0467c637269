"""Conversion throughput measurements.

Times convert (and the subsequent load) for a sweep of (workers, inner)
settings against a sequential baseline taken in the same process on the
same source checkpoint. Speedups are ratios of convert wall times, not
absolute numbers: wall-clock magnitudes depend entirely on the host.

A warmup pass runs the full pipeline once before any timing so every
timed run sees warm caches; the report says so.
"""

from __future__ import annotations

import csv
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from itertools import product

from .convert import convert
from .load import load
from .models import ModelSpec, init_state, make_model
from .parallel import ParallelConfig, PPSchedule, ZeroStage
from .partition import partition

REPORT_FORMAT_VERSION = 1


@dataclass
class BenchRow:
    model: str
    params_numel: int
    n_workers: int
    inner: int
    wall_ms_convert: float
    wall_ms_load: float
    speedup_vs_sequential: float


@dataclass
class BenchReport:
    rows: list[BenchRow]  # rows[0] is the sequential baseline
    warm_cache: bool
    note: str = ""


def _default_cfg(spec: ModelSpec) -> ParallelConfig:
    pp = 2 if spec.n_layers >= 2 else 1
    return ParallelConfig(
        dp=2, tp=1, pp=pp, sp=1, zero_stage=ZeroStage.Z1, pp_schedule=PPSchedule()
    )


def bench(
    model: ModelSpec | str,
    workers_list: list[int],
    inner_list: list[int],
    scale: dict | None = None,
    cfg: ParallelConfig | None = None,
    seed: int = 7,
    scratch: str | None = None,
    warmup: bool = True,
) -> BenchReport:
    """Sweep workers x inner over one source checkpoint.

    Returns |workers_list x inner_list| + 1 rows; the extra first row is the
    sequential baseline (workers=1, inner=1) every speedup is measured
    against. Output directories are deleted between runs so disk use stays
    at one source plus one atomic copy.
    """
    if isinstance(model, ModelSpec):
        spec = model
    else:
        defaults = {"n_layers": 4, "hidden": 64, "n_experts": 4, "q_heads": 8, "kv_heads": 2}
        spec = make_model(model, {**defaults, **(scale or {})})
    cfg = cfg or _default_cfg(spec)
    own = scratch is None
    root = tempfile.mkdtemp(prefix="ucp_bench_") if own else scratch
    os.makedirs(root, exist_ok=True)
    try:
        state = init_state(spec, seed)
        src_dir = os.path.join(root, "src")
        partition(state, cfg, src_dir)
        del state

        def timed_pair(n_workers: int, inner: int) -> tuple[float, float]:
            out = os.path.join(root, "atomic")
            shutil.rmtree(out, ignore_errors=True)
            t0 = time.perf_counter()
            convert(src_dir, out, n_workers=n_workers, inner=inner)
            t1 = time.perf_counter()
            load(out, cfg)
            t2 = time.perf_counter()
            return (t1 - t0) * 1e3, (t2 - t1) * 1e3

        if warmup:
            timed_pair(1, 1)

        seq_convert, seq_load = timed_pair(1, 1)
        rows = [
            BenchRow(
                spec.name, spec.total_numel, 1, 1, seq_convert, seq_load, 1.0
            )
        ]
        for w, i in product(workers_list, inner_list):
            c_ms, l_ms = timed_pair(w, i)
            rows.append(
                BenchRow(
                    spec.name,
                    spec.total_numel,
                    w,
                    i,
                    c_ms,
                    l_ms,
                    seq_convert / c_ms if c_ms > 0 else float("inf"),
                )
            )
        return BenchReport(rows, warm_cache=warmup)
    finally:
        if own:
            shutil.rmtree(root, ignore_errors=True)


def write_bench_csv(report: BenchReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [
                "format_version",
                "model",
                "params_numel",
                "n_workers",
                "inner",
                "wall_ms_convert",
                "wall_ms_load",
                "speedup_vs_sequential",
                "warm_cache",
            ]
        )
        for r in report.rows:
            w.writerow(
                [
                    REPORT_FORMAT_VERSION,
                    r.model,
                    r.params_numel,
                    r.n_workers,
                    r.inner,
                    f"{r.wall_ms_convert:.2f}",
                    f"{r.wall_ms_load:.2f}",
                    f"{r.speedup_vs_sequential:.3f}",
                    int(report.warm_cache),
                ]
            )


def render_bench_table(report: BenchReport) -> str:
    head = f"{'row':>3} {'workers':>7} {'inner':>5} {'convert ms':>11} {'load ms':>9} {'speedup':>8}"
    lines = [head, "-" * len(head)]
    for i, r in enumerate(report.rows):
        tag = " (baseline)" if i == 0 else ""
        lines.append(
            f"{i:>3} {r.n_workers:>7} {r.inner:>5} {r.wall_ms_convert:>11.1f}"
            f" {r.wall_ms_load:>9.1f} {r.speedup_vs_sequential:>8.2f}{tag}"
        )
    lines.append(
        f"model={report.rows[0].model} params={report.rows[0].params_numel}"
        f" warm_cache={report.warm_cache}"
    )
    return "\n".join(lines)
