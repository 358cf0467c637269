"""Command-line front end.

Verbs: partition, convert, load, resume, verify, bench, inspect. Every
verb exits 0 only when everything it checked passed; UcpError failures
print one line to stderr and exit 1. Report-producing verbs write CSV
plus rendered PNG figures next to it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .bench import bench, render_bench_table, write_bench_csv
from .convert import convert
from .errors import UcpError
from .load import load, resume
from .models import FAMILIES, init_state, make_model, train_steps, TrainerConfig
from .parallel import parse_config_string
from .partition import partition
from .tensor import DType, read_tensor
from .verify import (
    default_grids,
    merge_reports,
    render_verify_table,
    verify_roundtrip,
    write_verify_csv,
)

_DTYPES = {"f32": DType.F32, "f16": DType.F16, "bf16": DType.BF16}
_DEFAULT_SCALE = {"n_layers": 4, "hidden": 64, "n_experts": 4, "q_heads": 8, "kv_heads": 2}


def _bool_flag(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _cmd_partition(args) -> int:
    scale = {**_DEFAULT_SCALE, **(json.loads(args.scale) if args.scale else {})}
    spec = make_model(args.model, scale)
    cfg = parse_config_string(args.config)
    state = init_state(spec, args.seed)
    if args.steps:
        state = train_steps(state, TrainerConfig(), 0, args.steps)
    partition(state, cfg, args.out, workers=args.workers)
    print(f"wrote {cfg.world_size} rank dirs under {args.out} (step {state.step})")
    return 0


def _cmd_convert(args) -> int:
    atomic = convert(
        args.src,
        args.out,
        n_workers=args.workers,
        inner=args.inner,
        strict_replicate=args.strict_replicate,
    )
    print(
        f"converted {args.src} -> {args.out}:"
        f" {len(atomic.spec.params)} params at step {atomic.step}"
    )
    return 0


def _cmd_load(args) -> int:
    cfg = parse_config_string(args.config)
    world = load(
        args.atomic, cfg, dtype=_DTYPES[args.dtype], bypass=not args.no_bypass
    )
    st = world.stats
    if args.stats:
        payload = {"format_version": 1, **st.to_dict()}
        with open(args.stats, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    print(
        f"loaded step {world.step} into {cfg.world_size} ranks:"
        f" files_read={st.files_read} bytes_read={st.bytes_read}"
        f" peak_resident={st.peak_resident_elements}"
    )
    return 0


def _cmd_resume(args) -> int:
    cfg = parse_config_string(args.config)
    world = resume(
        args.src,
        cfg,
        args.scratch,
        n_workers=args.workers,
        inner=args.inner,
        dtype=_DTYPES[args.dtype],
    )
    st = world.stats
    if args.stats:
        payload = {"format_version": 1, **st.to_dict()}
        with open(args.stats, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    how = "directly (configs match)" if st.conversions_invoked == 0 else "via conversion"
    print(f"resumed step {world.step} under {args.config} {how}")
    return 0


def _cmd_verify(args) -> int:
    from .plots import verify_grid_png

    os.makedirs(args.out_dir, exist_ok=True)
    grids = default_grids(quick=args.quick)
    reports = [
        verify_roundtrip(g, scratch=args.scratch, jobs=args.jobs) for g in grids
    ]
    report = merge_reports(reports)
    csv_path = os.path.join(args.out_dir, "verify_report.csv")
    png_path = os.path.join(args.out_dir, "verify_grid.png")
    write_verify_csv(report, csv_path)
    verify_grid_png(report, png_path)
    print(render_verify_table(report))
    print(f"report: {csv_path}")
    print(f"figure: {png_path}")
    return 0 if report.ok else 1


def _cmd_bench(args) -> int:
    from .plots import bench_speedup_png

    os.makedirs(args.out_dir, exist_ok=True)
    scale = json.loads(args.scale) if args.scale else None
    cfg = parse_config_string(args.config) if args.config else None
    report = bench(
        args.model,
        _int_list(args.workers),
        _int_list(args.inner),
        scale=scale,
        cfg=cfg,
        seed=args.seed,
    )
    csv_path = os.path.join(args.out_dir, "bench.csv")
    png_path = os.path.join(args.out_dir, "bench_speedup.png")
    write_bench_csv(report, csv_path)
    bench_speedup_png(report, png_path)
    print(render_bench_table(report))
    print(f"report: {csv_path}")
    print(f"figure: {png_path}")
    return 0


def _print_json(path: str) -> None:
    with open(path) as f:
        doc = json.load(f)
    print(f"== {path}")
    print(json.dumps(doc, indent=2))


def _cmd_inspect(args) -> int:
    path = args.path
    if os.path.isdir(path):
        found = []
        for name in ("config.json", "model.json", "ucp_meta.json"):
            p = os.path.join(path, name)
            if os.path.isfile(p):
                found.append(p)
        for entry in sorted(os.listdir(path)):
            mp = os.path.join(path, entry, "shards.json")
            if os.path.isfile(mp):
                found.append(mp)
        if not found:
            print(f"no checkpoint JSON under {path}", file=sys.stderr)
            return 1
        for p in found:
            _print_json(p)
        return 0
    if path.endswith(".ucpt"):
        t = read_tensor(path)
        print(f"== {path}")
        print(f"dtype={t.dtype.name.lower()} shape={list(t.shape)} nbytes={t.nbytes}")
        return 0
    _print_json(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ucp",
        description="Partition, convert, and reload simulated distributed checkpoints.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("partition", help="write a distributed checkpoint")
    p.add_argument("--model", required=True, choices=FAMILIES)
    p.add_argument("--scale", help='JSON, e.g. \'{"n_layers":4,"hidden":64}\'')
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", required=True, help="dp,tp,pp,sp,zero,schedule")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=0, help="trainer steps before saving")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_partition)

    p = sub.add_parser("convert", help="distributed checkpoint -> atomic checkpoint")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--inner", type=int, default=1)
    p.add_argument("--strict-replicate", type=_bool_flag, default=True)
    p.set_defaults(fn=_cmd_convert)

    p = sub.add_parser("load", help="load an atomic checkpoint under a target config")
    p.add_argument("--atomic", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f32")
    p.add_argument("--stats", help="write load statistics JSON here")
    p.add_argument("--no-bypass", action="store_true")
    p.set_defaults(fn=_cmd_load)

    p = sub.add_parser("resume", help="resume from a distributed checkpoint")
    p.add_argument("--src", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--scratch", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--inner", type=int, default=1)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f32")
    p.add_argument("--stats")
    p.set_defaults(fn=_cmd_resume)

    p = sub.add_parser("verify", help="run the round-trip grid")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--out-dir", default="ucp_reports")
    p.add_argument("--scratch")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("bench", help="time convert/load across worker settings")
    p.add_argument("--model", default="DenseGPT", choices=FAMILIES)
    p.add_argument("--scale")
    p.add_argument("--config")
    p.add_argument("--workers", default="1,2,4")
    p.add_argument("--inner", default="1")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", default="ucp_reports")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("inspect", help="pretty-print checkpoint JSON or a tensor header")
    p.add_argument("path")
    p.set_defaults(fn=_cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UcpError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # stdout went away (e.g. piped into head); not a failure
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
