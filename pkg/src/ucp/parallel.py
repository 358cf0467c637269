"""Parallelism configs and the layout arithmetic behind them.

Everything that decides *which elements live on which rank* is in this one
module: pattern assignment per parameter kind, ZeRO flatten/pad ranges, PP
layer maps, and fragment extraction. The partitioner uses it to write shards
and the target loader uses the same functions to slice atomic tensors, so
the two can never disagree about layout.

Rank numbering: g = ((pp_rank * tp + tp_rank) * dp + dp_rank), i.e. pp is the
outermost axis and dp the innermost. sp is carried for bookkeeping but folds
into dp and has no effect on weight layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import IncompatibleConfigError, PatternCoverageError, ShapeError
from .models import ModelSpec, ParamKind, ParamSpec

# pattern tags as they appear in manifests and messages
UNIQUE = "unique"
REPLICATE = "replicate"
PARTIAL = "partial"
SHARD_V = "shard_v"
SHARD_H = "shard_h"
SHARD_HY = "shard_hy"
SHARD_NC = "shard_nc"

PATTERNS = (UNIQUE, REPLICATE, PARTIAL, SHARD_V, SHARD_H, SHARD_HY, SHARD_NC)


class ZeroStage(Enum):
    Z0 = "z0"
    Z1 = "z1"
    Z3 = "z3"


@dataclass(frozen=True)
class PPSchedule:
    kind: str = "sequential"  # "sequential" (1F1B) or "interleaved"
    v: int = 1  # virtual stages per rank when interleaved

    def __post_init__(self):
        if self.kind not in ("sequential", "interleaved"):
            raise IncompatibleConfigError(f"unknown pp schedule {self.kind!r}")
        if self.kind == "sequential" and self.v != 1:
            raise IncompatibleConfigError("sequential schedule has no interleave")
        if self.kind == "interleaved" and self.v < 2:
            raise IncompatibleConfigError("interleaved schedule needs v >= 2")


@dataclass(frozen=True)
class ParallelConfig:
    dp: int = 1
    tp: int = 1
    pp: int = 1
    sp: int = 1
    zero_stage: ZeroStage = ZeroStage.Z0
    pp_schedule: PPSchedule = field(default_factory=PPSchedule)

    @property
    def world_size(self) -> int:
        return self.dp * self.tp * self.pp

    def rank_of(self, pp_rank: int, tp_rank: int, dp_rank: int) -> int:
        return (pp_rank * self.tp + tp_rank) * self.dp + dp_rank

    def coords_of(self, g: int) -> tuple[int, int, int]:
        dp_rank = g % self.dp
        t = g // self.dp
        return (t // self.tp, t % self.tp, dp_rank)

    def validate(self) -> None:
        if min(self.dp, self.tp, self.pp, self.sp) < 1:
            raise IncompatibleConfigError("all parallel degrees must be >= 1")
        if self.zero_stage is ZeroStage.Z3 and (self.tp != 1 or self.pp != 1):
            raise IncompatibleConfigError("ZeRO-3 requires tp == 1 and pp == 1")
        if self.pp_schedule.kind == "interleaved" and self.pp < 2:
            raise IncompatibleConfigError("interleaved schedule needs pp >= 2")
        if self.sp > 1 and self.dp % self.sp != 0:
            raise IncompatibleConfigError("sp folds into dp and must divide it")


def validate_model_config(spec: ModelSpec, cfg: ParallelConfig) -> None:
    """Reject configs the model cannot be partitioned under."""
    cfg.validate()
    depth = max(spec.n_layers, 1)
    if cfg.pp > depth:
        raise IncompatibleConfigError(
            f"pp={cfg.pp} exceeds layer depth {depth} of {spec.name}"
        )
    sched = cfg.pp_schedule
    if sched.kind == "interleaved":
        if spec.n_layers % (cfg.pp * sched.v) != 0:
            raise IncompatibleConfigError(
                f"interleaved(v={sched.v}) needs n_layers divisible by "
                f"pp*v = {cfg.pp * sched.v}, got {spec.n_layers}"
            )
    for p in spec.params:
        tp_mode(p, cfg.tp)  # raises PatternCoverageError on a gap


# ---------------------------------------------------------------------------
# PP layer maps
# ---------------------------------------------------------------------------


def pp_layer_map(n_layers: int, pp: int, schedule: PPSchedule) -> list[list[int]]:
    """Layers owned by each stage, ascending within a stage.

    Sequential: contiguous blocks of n_layers/pp, remainder to the earliest
    stages. Interleaved(v): n_layers split into pp*v contiguous chunks;
    chunk j goes to stage j mod pp.
    """
    depth = max(n_layers, 1)
    if pp < 1 or pp > depth:
        raise IncompatibleConfigError(f"pp={pp} invalid for {n_layers} layers")
    if schedule.kind == "sequential":
        base, rem = depth // pp, depth % pp
        out, start = [], 0
        for s in range(pp):
            size = base + (1 if s < rem else 0)
            out.append(list(range(start, start + size)))
            start += size
        if n_layers == 0:
            return [[0] if s == 0 else [] for s in range(pp)]
        return out
    n_chunks = pp * schedule.v
    if n_layers % n_chunks != 0:
        raise IncompatibleConfigError(
            f"interleaved needs n_layers % (pp*v) == 0, got {n_layers} % {n_chunks}"
        )
    size = n_layers // n_chunks
    out = [[] for _ in range(pp)]
    for j in range(n_chunks):
        out[j % pp].extend(range(j * size, (j + 1) * size))
    return out


def stage_of_layer(n_layers: int, pp: int, schedule: PPSchedule, layer: int) -> int:
    for s, layers in enumerate(pp_layer_map(n_layers, pp, schedule)):
        if layer in layers:
            return s
    raise IncompatibleConfigError(f"layer {layer} outside [0, {max(n_layers, 1)})")


# ---------------------------------------------------------------------------
# ZeRO flatten
# ---------------------------------------------------------------------------


def zero_flatten_meta(numel: int, dp: int) -> tuple[int, int, list[tuple[int, int]]]:
    """(padded_numel, pad_elems, per-rank flat ranges) for an even dp split
    of a row-major flattening padded with zeros."""
    if dp < 1:
        raise IncompatibleConfigError("dp must be >= 1")
    per = -(-numel // dp)  # ceil
    padded = per * dp
    ranges = [(r * per, (r + 1) * per) for r in range(dp)]
    return padded, padded - numel, ranges


# ---------------------------------------------------------------------------
# pattern assignment
# ---------------------------------------------------------------------------

# tp-level sharding mode per parameter kind; "full" means tp == 1
_LN_KINDS = (ParamKind.LAYERNORM_WEIGHT, ParamKind.LAYERNORM_BIAS)
_NC_KINDS = (ParamKind.FUSED_QKV, ParamKind.FUSED_EXPERT)
_EMBED_KINDS = (ParamKind.EMBEDDING, ParamKind.TIED_EMBEDDING)


def tp_mode(p: ParamSpec, tp: int) -> str:
    """How a parameter splits across the tp axis. Raises PatternCoverageError
    when no rule covers the combination."""
    if tp == 1:
        return "full"
    if p.kind in _LN_KINDS:
        return REPLICATE
    if p.kind is ParamKind.ASYNC_PARTIAL:
        return PARTIAL
    if p.kind in _EMBED_KINDS:
        _require_axis_divisible(p, 0, tp)
        return SHARD_V
    if p.kind is ParamKind.MATMUL2D:
        if p.tp_axis_hint == 0:
            _require_axis_divisible(p, 0, tp)
            return SHARD_V
        if p.tp_axis_hint == 1:
            _require_axis_divisible(p, 1, tp)
            return SHARD_H
        raise PatternCoverageError(
            f"{p.name}: matmul2d without a tp axis hint cannot shard under tp={tp}"
        )
    if p.kind in _NC_KINDS:
        segs = p.nc_segments
        if not segs:
            raise PatternCoverageError(f"{p.name}: fused param lacks nc_segments")
        off = 0
        for s, (start, length) in enumerate(segs):
            if start != off or length <= 0:
                raise PatternCoverageError(
                    f"{p.name}: nc_segments must tile axis 0 contiguously"
                )
            if length % tp != 0:
                raise PatternCoverageError(
                    f"{p.name}: segment {s} of length {length} not divisible by tp={tp}"
                )
            off += length
        if off != p.shape[0]:
            raise PatternCoverageError(f"{p.name}: nc_segments do not cover axis 0")
        return SHARD_NC
    raise PatternCoverageError(f"{p.name}: no rule for kind {p.kind.value} under tp={tp}")


def _require_axis_divisible(p: ParamSpec, axis: int, tp: int) -> None:
    if len(p.shape) <= axis:
        raise PatternCoverageError(f"{p.name}: shape {p.shape} lacks axis {axis}")
    if p.shape[axis] % tp != 0:
        raise PatternCoverageError(
            f"{p.name}: axis {axis} extent {p.shape[axis]} not divisible by tp={tp}"
        )


def zero_flattens(kind: str, zero: ZeroStage) -> bool:
    """Does this state kind get flat-sharded over dp under the given stage?"""
    if zero is ZeroStage.Z0:
        return False
    if zero is ZeroStage.Z1:
        return kind in ("m", "v")
    return True  # Z3: weights and moments


def tp_fragment_shape(p: ParamSpec, mode: str, tp: int) -> tuple[int, ...]:
    if mode in ("full", REPLICATE, PARTIAL):
        return p.shape
    if mode == SHARD_V:
        return (p.shape[0] // tp,) + p.shape[1:]
    if mode == SHARD_H:
        return p.shape[:1] + (p.shape[1] // tp,) + p.shape[2:]
    if mode == SHARD_NC:
        rows = sum(length // tp for _, length in p.nc_segments)
        return (rows,) + p.shape[1:]
    raise PatternCoverageError(f"no fragment shape for mode {mode}")


def pattern_tag(mode: str, flat: bool, dp: int) -> str:
    """Manifest pattern tag for a fragment. Flat-sharded fragments of an
    otherwise unsharded tensor read as shard_v (a 1D vertical shard); an
    unsharded, unflattened fragment is unique only in a lone dp group."""
    if flat:
        return SHARD_V if mode == "full" else mode
    if mode == "full":
        return REPLICATE if dp > 1 else UNIQUE
    return mode


# ---------------------------------------------------------------------------
# per-rank records
# ---------------------------------------------------------------------------

STATE_KINDS = ("weight", "m", "v")


@dataclass(frozen=True)
class RecordMeta:
    """Everything about one fragment except its payload. This is what rank
    manifests serialize and what FragmentMsgs carry."""

    param: str
    kind: str  # weight | m | v
    pattern: str
    placement: tuple[int, int, int]  # (pp_rank, tp_rank, dp_rank)
    shape: tuple[int, ...]  # fragment shape as stored
    segments: tuple[tuple[int, int], ...] | None = None
    flat_range: tuple[int, int] | None = None
    pad_elems: int = 0

    @property
    def file(self) -> str:
        return f"{self.param}.{self.kind}.ucpt"


def enumerate_rank_records(
    spec: ModelSpec, cfg: ParallelConfig, g: int
) -> list[RecordMeta]:
    """Fragment records held by global rank g, in spec param order with
    state kinds ordered weight, m, v."""
    pp_rank, tp_rank, dp_rank = cfg.coords_of(g)
    stages = pp_layer_map(spec.n_layers, cfg.pp, cfg.pp_schedule)
    mine = set(stages[pp_rank])
    out: list[RecordMeta] = []
    for p in spec.params:
        layer = min(p.layer_index, max(spec.n_layers - 1, 0))
        if layer not in mine:
            continue
        mode = tp_mode(p, cfg.tp)
        frag_shape = tp_fragment_shape(p, mode, cfg.tp)
        frag_numel = int(np.prod(frag_shape, dtype=np.int64)) if frag_shape else 1
        for kind in STATE_KINDS:
            flat = zero_flattens(kind, cfg.zero_stage)
            if flat:
                _, pad, ranges = zero_flatten_meta(frag_numel, cfg.dp)
                rng = ranges[dp_rank]
                out.append(
                    RecordMeta(
                        param=p.name,
                        kind=kind,
                        pattern=pattern_tag(mode, True, cfg.dp),
                        placement=(pp_rank, tp_rank, dp_rank),
                        shape=(rng[1] - rng[0],),
                        segments=p.nc_segments if mode == SHARD_NC else None,
                        flat_range=rng,
                        pad_elems=pad if dp_rank == cfg.dp - 1 else 0,
                    )
                )
            else:
                out.append(
                    RecordMeta(
                        param=p.name,
                        kind=kind,
                        pattern=pattern_tag(mode, False, cfg.dp),
                        placement=(pp_rank, tp_rank, dp_rank),
                        shape=frag_shape,
                        segments=p.nc_segments if mode == SHARD_NC else None,
                    )
                )
    return out


# ---------------------------------------------------------------------------
# fragment extraction (shared by partition and load)
# ---------------------------------------------------------------------------


def partial_noise(x: np.ndarray, tp_rank: int, tp: int) -> np.ndarray:
    """Rank-indexed divergence for Partial fragments with an exactly
    recoverable mean.

    Ranks pair up (2k, 2k+1); the pair moves k+1 ulps up/down via nextafter.
    Elements where the pair would not sum to exactly twice the value in f64
    (zeros, binade edges, non-finite) fall back to the unperturbed value, and
    an odd trailing rank stays unperturbed, so the f64 mean over ascending tp
    ranks reproduces x bit-exactly for arbitrary f32 input.
    """
    if tp == 1 or (tp_rank == tp - 1 and tp % 2 == 1):
        return x
    steps = tp_rank // 2 + 1
    hi = x.copy()
    lo = x.copy()
    pinf = np.float32(np.inf)
    ninf = np.float32(-np.inf)
    for _ in range(steps):
        hi = np.nextafter(hi, pinf)
        lo = np.nextafter(lo, ninf)
    # x != 0 keeps the sign of -0.0: its pair would mean back to +0.0
    ok = (
        np.isfinite(x)
        & (x != 0)
        & (
            hi.astype(np.float64) + lo.astype(np.float64)
            == 2.0 * x.astype(np.float64)
        )
    )
    chosen = hi if tp_rank % 2 == 0 else lo
    return np.where(ok, chosen, x).astype(np.float32)


def extract_fragment(
    p: ParamSpec, cfg: ParallelConfig, meta: RecordMeta, full: np.ndarray
) -> np.ndarray:
    """Slice one rank's fragment out of a consolidated f32 array. The exact
    inverse of the union operation; used by both partition and load."""
    if tuple(full.shape) != p.shape:
        raise ShapeError(f"{p.name}: expected {p.shape}, got {tuple(full.shape)}")
    _, tp_rank, dp_rank = meta.placement
    mode = tp_mode(p, cfg.tp)

    if mode in ("full", REPLICATE):
        frag = full
    elif mode == PARTIAL:
        frag = partial_noise(full, tp_rank, cfg.tp)
    elif mode == SHARD_V:
        rows = p.shape[0] // cfg.tp
        frag = full[tp_rank * rows : (tp_rank + 1) * rows]
    elif mode == SHARD_H:
        cols = p.shape[1] // cfg.tp
        frag = full[:, tp_rank * cols : (tp_rank + 1) * cols]
    elif mode == SHARD_NC:
        parts = []
        for start, length in p.nc_segments:
            rows = length // cfg.tp
            lo = start + tp_rank * rows
            parts.append(full[lo : lo + rows])
        frag = np.concatenate(parts, axis=0)
    else:
        raise PatternCoverageError(f"mode {mode} not extractable")

    if meta.flat_range is None:
        return np.ascontiguousarray(frag, dtype=np.float32)

    flat = np.ascontiguousarray(frag, dtype=np.float32).reshape(-1)
    padded, _, _ = zero_flatten_meta(flat.size, cfg.dp)
    if padded != flat.size:
        flat = np.concatenate([flat, np.zeros(padded - flat.size, dtype=np.float32)])
    lo, hi = meta.flat_range
    return np.ascontiguousarray(flat[lo:hi])


# ---------------------------------------------------------------------------
# synthetic 2D grid split (ShardHy); only reachable from direct tests, a
# ParallelConfig cannot express a row x col tp grid
# ---------------------------------------------------------------------------


def hy_split(full: np.ndarray, rows: int, cols: int) -> list[tuple[tuple[int, int], np.ndarray]]:
    if full.ndim != 2:
        raise ShapeError("hy_split needs a 2D array")
    if full.shape[0] % rows or full.shape[1] % cols:
        raise ShapeError(
            f"grid {rows}x{cols} does not divide shape {tuple(full.shape)}"
        )
    br, bc = full.shape[0] // rows, full.shape[1] // cols
    out = []
    for r in range(rows):
        for c in range(cols):
            block = full[r * br : (r + 1) * br, c * bc : (c + 1) * bc]
            out.append(((r, c), np.ascontiguousarray(block)))
    return out


# ---------------------------------------------------------------------------
# serialization of configs
# ---------------------------------------------------------------------------


def config_to_dict(cfg: ParallelConfig) -> dict:
    return {
        "dp": cfg.dp,
        "tp": cfg.tp,
        "pp": cfg.pp,
        "sp": cfg.sp,
        "zero_stage": cfg.zero_stage.value,
        "pp_schedule": cfg.pp_schedule.kind,
        "pp_interleave": cfg.pp_schedule.v,
    }


def config_from_dict(d: dict) -> ParallelConfig:
    try:
        cfg = ParallelConfig(
            dp=int(d["dp"]),
            tp=int(d["tp"]),
            pp=int(d["pp"]),
            sp=int(d["sp"]),
            zero_stage=ZeroStage(d["zero_stage"]),
            pp_schedule=PPSchedule(d["pp_schedule"], int(d["pp_interleave"])),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise IncompatibleConfigError(f"bad parallel config: {e}") from e
    cfg.validate()
    return cfg


def parse_config_string(s: str) -> ParallelConfig:
    """Parse 'dp,tp,pp,sp,zero,schedule' as in `--config 2,1,4,1,z1,seq`;
    schedule is `seq` or `int<v>` (e.g. int2)."""
    parts = s.split(",")
    if len(parts) != 6:
        raise IncompatibleConfigError(
            f"config string needs 6 comma-separated fields, got {len(parts)}: {s!r}"
        )
    try:
        dp, tp, pp, sp = (int(x) for x in parts[:4])
    except ValueError as e:
        raise IncompatibleConfigError(f"bad degree in {s!r}: {e}") from e
    zero = parts[4].strip().lower()
    try:
        zs = ZeroStage(zero)
    except ValueError as e:
        raise IncompatibleConfigError(f"zero stage must be z0|z1|z3, got {zero!r}") from e
    sched = parts[5].strip().lower()
    if sched == "seq":
        ps = PPSchedule()
    elif sched.startswith("int"):
        try:
            ps = PPSchedule("interleaved", int(sched[3:]))
        except ValueError as e:
            raise IncompatibleConfigError(f"bad interleave in {sched!r}") from e
    else:
        raise IncompatibleConfigError(f"schedule must be seq or int<v>, got {sched!r}")
    cfg = ParallelConfig(dp, tp, pp, sp, zs, ps)
    cfg.validate()
    return cfg


def format_config_string(cfg: ParallelConfig) -> str:
    sched = "seq" if cfg.pp_schedule.kind == "sequential" else f"int{cfg.pp_schedule.v}"
    return f"{cfg.dp},{cfg.tp},{cfg.pp},{cfg.sp},{cfg.zero_stage.value},{sched}"
