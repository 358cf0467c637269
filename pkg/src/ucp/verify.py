"""Round-trip verification grids.

A grid enumerates (model, source config, target config, seed) cells. Each
cell partitions a trained state under the source config, converts to the
atomic layout, reloads under the target config, consolidates with the
reference oracle, and compares bit-for-bit against the original state.
Cells with resume_steps > 0 additionally check that resuming from the
checkpoint and continuing training matches an uninterrupted run of the
same length.

The runner returns a plain report; CSV and table rendering are separate
helpers so the grid run itself touches nothing outside its scratch
directory. Failures are report entries, never exceptions.
"""

from __future__ import annotations

import csv
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .convert import convert
from .load import load, resume
from .models import (
    ModelState,
    TrainerConfig,
    first_diff,
    init_state,
    make_model,
    train_steps,
)
from .oracle import consolidate_world
from .parallel import (
    ParallelConfig,
    PPSchedule,
    ZeroStage,
    format_config_string,
    validate_model_config,
)
from .partition import partition

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridCell:
    family: str
    scale: tuple[tuple[str, int], ...]  # sorted (key, value) pairs
    src: ParallelConfig
    tgt: ParallelConfig
    seed: int
    steps: int
    resume_steps: int

    @property
    def scale_dict(self) -> dict:
        return dict(self.scale)

    def label(self) -> str:
        sc = ",".join(f"{k}={v}" for k, v in self.scale)
        return (
            f"{self.family}({sc}) {format_config_string(self.src)}"
            f" -> {format_config_string(self.tgt)} seed={self.seed}"
        )


@dataclass
class GridSpec:
    """models x (src, tgt) pairs x seeds, with shared step counts."""

    models: list[tuple[str, dict]]
    pairs: list[tuple[ParallelConfig, ParallelConfig]]
    seeds: list[int] = field(default_factory=lambda: [7])
    steps: int = 3
    resume_steps: int = 0

    def validate(self) -> None:
        """Every pair must be compatible with every model up front."""
        for family, scale in self.models:
            spec = make_model(family, scale)
            for src, tgt in self.pairs:
                validate_model_config(spec, src)
                validate_model_config(spec, tgt)

    def cells(self) -> list[GridCell]:
        out = []
        for (family, scale), (src, tgt), seed in product(
            self.models, self.pairs, self.seeds
        ):
            out.append(
                GridCell(
                    family,
                    tuple(sorted(scale.items())),
                    src,
                    tgt,
                    seed,
                    self.steps,
                    self.resume_steps,
                )
            )
        return out


@dataclass
class CellResult:
    cell: GridCell
    ok: bool
    wall_ms: float
    detail: str = ""


@dataclass
class VerifyReport:
    results: list[CellResult]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if not r.ok)


def _diff_detail(got: ModelState, want: ModelState) -> str:
    d = first_diff(got, want)
    if d is None:
        return "states differ in step or metadata"
    param, kind, idx, ba, bb = d
    shape = got.spec.param(param).shape
    coords = tuple(int(c) for c in np.unravel_index(idx, shape))
    return f"first diff at {param}.{kind}{list(coords)}: 0x{ba:08X} != 0x{bb:08X}"


def _run_cell(cell: GridCell, cell_dir: str) -> CellResult:
    t0 = time.perf_counter()
    try:
        spec = make_model(cell.family, cell.scale_dict)
        state0 = init_state(spec, cell.seed)
        tc = TrainerConfig()
        state = (
            train_steps(state0, tc, 0, cell.steps) if cell.steps else state0
        )

        src_dir = os.path.join(cell_dir, "src")
        atomic_dir = os.path.join(cell_dir, "atomic")
        partition(state, cell.src, src_dir)
        convert(src_dir, atomic_dir)
        world = load(atomic_dir, cell.tgt)
        got = consolidate_world(world)

        if got.step != state.step:
            return CellResult(
                cell,
                False,
                (time.perf_counter() - t0) * 1e3,
                f"step mismatch: {got.step} != {state.step}",
            )
        if not _states_bits_equal(got, state):
            return CellResult(
                cell, False, (time.perf_counter() - t0) * 1e3, _diff_detail(got, state)
            )

        if cell.resume_steps:
            scratch = os.path.join(cell_dir, "scratch")
            w2 = resume(src_dir, cell.tgt, scratch)
            resumed = train_steps(
                consolidate_world(w2), tc, cell.steps, cell.resume_steps
            )
            straight = train_steps(state0, tc, 0, cell.steps + cell.resume_steps)
            if not _states_bits_equal(resumed, straight):
                return CellResult(
                    cell,
                    False,
                    (time.perf_counter() - t0) * 1e3,
                    "resume: " + _diff_detail(resumed, straight),
                )
    except Exception as e:  # failures are report entries
        return CellResult(
            cell, False, (time.perf_counter() - t0) * 1e3, f"{type(e).__name__}: {e}"
        )
    return CellResult(cell, True, (time.perf_counter() - t0) * 1e3)


def _states_bits_equal(a: ModelState, b: ModelState) -> bool:
    return first_diff(a, b) is None


def verify_roundtrip(
    grid: GridSpec,
    scratch: str | None = None,
    jobs: int = 1,
    keep: bool = False,
) -> VerifyReport:
    """Run every grid cell; nothing is written outside the scratch root.

    Cells run sequentially by default for debuggability; jobs > 1 runs them
    in threads, each in its own subdirectory. With keep=False (default) a
    cell's directory is removed as soon as the cell finishes, and a scratch
    root we created ourselves is removed at the end.
    """
    grid.validate()
    own_root = scratch is None
    root = tempfile.mkdtemp(prefix="ucp_verify_") if own_root else scratch
    os.makedirs(root, exist_ok=True)
    cells = grid.cells()
    results: list[CellResult | None] = [None] * len(cells)

    def run_one(i: int) -> None:
        cdir = os.path.join(root, f"cell_{i:04d}")
        results[i] = _run_cell(cells[i], cdir)
        if not keep:
            shutil.rmtree(cdir, ignore_errors=True)

    try:
        if jobs <= 1:
            for i in range(len(cells)):
                run_one(i)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(run_one, range(len(cells))))
    finally:
        if own_root and not keep:
            shutil.rmtree(root, ignore_errors=True)
    return VerifyReport([r for r in results if r is not None])


def write_verify_csv(report: VerifyReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [
                "format_version",
                "family",
                "scale",
                "seed",
                "src",
                "tgt",
                "steps",
                "resume_steps",
                "ok",
                "wall_ms",
                "detail",
            ]
        )
        for r in report.results:
            c = r.cell
            w.writerow(
                [
                    REPORT_FORMAT_VERSION,
                    c.family,
                    ";".join(f"{k}={v}" for k, v in c.scale),
                    c.seed,
                    format_config_string(c.src),
                    format_config_string(c.tgt),
                    c.steps,
                    c.resume_steps,
                    int(r.ok),
                    f"{r.wall_ms:.1f}",
                    r.detail,
                ]
            )


def render_verify_table(report: VerifyReport) -> str:
    lines = []
    width = max((len(r.cell.label()) for r in report.results), default=4)
    for r in report.results:
        mark = "PASS" if r.ok else "FAIL"
        line = f"{mark}  {r.cell.label():<{width}}  {r.wall_ms:8.1f} ms"
        if r.detail:
            line += f"  {r.detail}"
        lines.append(line)
    lines.append(
        f"{len(report.results) - report.n_failed}/{len(report.results)} cells passed"
    )
    return "\n".join(lines)


# -- stock grids ------------------------------------------------------------


def _cfg(dp, tp, pp, zero=ZeroStage.Z0, sched=None) -> ParallelConfig:
    return ParallelConfig(
        dp=dp,
        tp=tp,
        pp=pp,
        sp=1,
        zero_stage=zero,
        pp_schedule=sched or PPSchedule(),
    )


def stock_models() -> list[tuple[str, dict]]:
    return [
        ("DenseGPT", {"n_layers": 4, "hidden": 64}),
        ("MoE", {"n_layers": 4, "hidden": 64, "n_experts": 4}),
        ("GQA", {"n_layers": 4, "hidden": 64, "q_heads": 8, "kv_heads": 2}),
    ]


def roundtrip_configs() -> list[ParallelConfig]:
    """dp in {1,2,4} x tp in {1,2} x pp in {1,2} x {z0,z1,z3}, with z3 only
    where tp=pp=1, plus interleaved(v=2) variants of every pp=2 cell."""
    out = []
    for dp in (1, 2, 4):
        for tp in (1, 2):
            for pp in (1, 2):
                for zero in (ZeroStage.Z0, ZeroStage.Z1, ZeroStage.Z3):
                    if zero is ZeroStage.Z3 and (tp > 1 or pp > 1):
                        continue
                    out.append(_cfg(dp, tp, pp, zero))
                    if pp == 2:
                        out.append(_cfg(dp, tp, pp, zero, PPSchedule("interleaved", 2)))
    return out


def resume_pairs() -> list[tuple[ParallelConfig, ParallelConfig]]:
    """Representative reconfigurations, the dp=2,pp=4,z1 -> dp=2,tp=2,pp=2
    case first."""
    i2 = PPSchedule("interleaved", 2)
    return [
        (_cfg(2, 1, 4, ZeroStage.Z1), _cfg(2, 2, 2)),
        (_cfg(1, 1, 1), _cfg(4, 2, 1, ZeroStage.Z1)),
        (_cfg(4, 1, 1, ZeroStage.Z3), _cfg(2, 2, 2)),
        (_cfg(2, 2, 2, ZeroStage.Z1, i2), _cfg(1, 1, 4)),
        (_cfg(4, 2, 1, ZeroStage.Z1), _cfg(2, 1, 1, ZeroStage.Z3)),
        (_cfg(2, 2, 1), _cfg(2, 1, 2, ZeroStage.Z1)),
        (_cfg(1, 1, 4), _cfg(4, 1, 1, ZeroStage.Z1)),
    ]


def default_grids(quick: bool = False) -> list[GridSpec]:
    """The stock verification run: identity round trips over the full config
    grid, then cross-config resume checks."""
    models = stock_models()
    configs = roundtrip_configs()
    pairs = resume_pairs()
    if quick:
        models = models[:1]
        configs = [c for c in configs if c.dp <= 2][:8]
        pairs = pairs[:2]
    identity = GridSpec(models, [(c, c) for c in configs], steps=2 if quick else 3)
    cross = GridSpec(
        models,
        pairs,
        steps=2 if quick else 5,
        resume_steps=2 if quick else 5,
    )
    return [identity, cross]


def merge_reports(reports: list[VerifyReport]) -> VerifyReport:
    out: list[CellResult] = []
    for r in reports:
        out.extend(r.results)
    return VerifyReport(out)
