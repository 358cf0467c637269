"""Loading atomic checkpoints into a simulated target world.

The loader walks the model layer by layer. Within one dp group (fixed
pp_rank and tp_rank, dp varying) each atomic file is read from disk by
exactly one member rank, chosen round-robin over the layer's files sorted by
size descending, and handed to the other members in memory (a simulated
all-gather). A layer barrier releases the consolidated buffers before the
next layer starts, which bounds peak residency at one layer's consolidated
elements times the dp group size. `bypass=False` turns the assignment off so
every rank reads every file it needs; the stats counters make the 1x vs dp x
difference visible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointLayoutError, IncompatibleConfigError
from .models import STATE_KINDS, ModelSpec
from .parallel import (
    ParallelConfig,
    RecordMeta,
    enumerate_rank_records,
    extract_fragment,
    pp_layer_map,
    validate_model_config,
)
from . import convert as convert_mod
from .convert import ATOMIC_FILES, AtomicCheckpoint, load_atomic
from .partition import DistributedCheckpoint, load_checkpoint, read_manifest
from .tensor import DType, Tensor, cast, payload_bytes_on_disk, read_tensor


@dataclass(frozen=True)
class WorldShard:
    meta: RecordMeta
    tensor: Tensor


@dataclass
class LoadStats:
    bypass: bool = True
    files_read: int = 0
    bytes_read: int = 0
    peak_resident_elements: int = 0
    resident_bound: int = 0
    conversions_invoked: int = 0
    group_files_needed: dict = field(default_factory=dict)  # "pp,tp" -> count
    group_files_read: dict = field(default_factory=dict)
    per_rank: dict = field(default_factory=dict)  # g -> {files_read, bytes_read}

    def to_dict(self) -> dict:
        return {
            "bypass": self.bypass,
            "files_read": self.files_read,
            "bytes_read": self.bytes_read,
            "peak_resident_elements": self.peak_resident_elements,
            "resident_bound": self.resident_bound,
            "conversions_invoked": self.conversions_invoked,
            "group_files_needed": self.group_files_needed,
            "group_files_read": self.group_files_read,
            "per_rank": {str(k): v for k, v in self.per_rank.items()},
        }


@dataclass
class LoadedWorld:
    cfg: ParallelConfig
    spec: ModelSpec
    step: int
    metadata: dict
    shards: dict[int, list[WorldShard]]
    stats: LoadStats


@dataclass(frozen=True)
class UcpInfo:
    """Per-rank slice descriptions for a target config, plus group ids.

    replication_group maps ranks that hold bit-identical copies of a record
    to a shared key; dp_group groups the ranks that cooperate on reads.
    """

    cfg: ParallelConfig
    records: dict[int, list[RecordMeta]]

    def dp_group(self, g: int) -> str:
        pp_rank, tp_rank, _ = self.cfg.coords_of(g)
        return f"{pp_rank},{tp_rank}"

    def replication_group(self, meta: RecordMeta) -> str:
        pp_rank, tp_rank, dp_rank = meta.placement
        if meta.flat_range is not None:
            # flat shards are unique per dp rank
            return f"{meta.param}.{meta.kind}@{pp_rank},{tp_rank},{dp_rank}"
        return f"{meta.param}.{meta.kind}@{pp_rank},{tp_rank}"


def ucp_info(spec: ModelSpec, cfg: ParallelConfig) -> UcpInfo:
    """What every rank of a target world should hold. Shares all layout
    arithmetic with the partitioner."""
    validate_model_config(spec, cfg)
    return UcpInfo(
        cfg,
        {g: enumerate_rank_records(spec, cfg, g) for g in range(cfg.world_size)},
    )


def _layer_groups(spec: ModelSpec) -> list[tuple[int, list]]:
    """(layer, params) ascending; params keep spec order within a layer."""
    depth = max(spec.n_layers, 1)
    by_layer: dict[int, list] = {}
    for p in spec.params:
        layer = min(p.layer_index, depth - 1)
        by_layer.setdefault(layer, []).append(p)
    return sorted(by_layer.items())


def resident_bound_elements(spec: ModelSpec, dp: int) -> int:
    """dp * the largest single-layer consolidated element count (all three
    state kinds)."""
    worst = 0
    for _, params in _layer_groups(spec):
        worst = max(worst, sum(3 * p.numel for p in params))
    return dp * worst


def load(
    atomic_root: str,
    tgt: ParallelConfig,
    dtype: DType = DType.F32,
    bypass: bool = True,
) -> LoadedWorld:
    """Materialize the shard set of a target world from an atomic
    checkpoint. Weights are cast to `dtype`; optimizer moments stay f32."""
    atomic = load_atomic(atomic_root)
    spec = atomic.spec
    validate_model_config(spec, tgt)

    info = ucp_info(spec, tgt)
    stats = LoadStats(bypass=bypass)
    stats.resident_bound = resident_bound_elements(spec, tgt.dp)
    stats.per_rank = {
        g: {"files_read": 0, "bytes_read": 0} for g in range(tgt.world_size)
    }

    # index records by (rank, param, kind) so fragments can be filled in
    # read order and reported in canonical manifest order afterwards
    rec_by_key: dict[int, dict[tuple[str, str], RecordMeta]] = {
        g: {(m.param, m.kind): m for m in recs} for g, recs in info.records.items()
    }
    filled: dict[int, dict[tuple[str, str], Tensor]] = {
        g: {} for g in range(tgt.world_size)
    }

    stages = pp_layer_map(spec.n_layers, tgt.pp, tgt.pp_schedule)
    layer_stage = {
        layer: s for s, layers in enumerate(stages) for layer in layers
    }

    resident = 0
    peak = 0
    for layer, params in _layer_groups(spec):
        s = layer_stage[layer]
        files = [(p, kind) for p in params for kind in STATE_KINDS]
        # size-descending read assignment; name-keyed tie break keeps it
        # deterministic
        sized = sorted(
            (
                (payload_bytes_on_disk(atomic.param_file(p.name, kind)), p, kind)
                for p, kind in files
            ),
            key=lambda x: (-x[0], x[1].name, x[2]),
        )
        for t in range(tgt.tp):
            gkey = f"{s},{t}"
            stats.group_files_needed[gkey] = (
                stats.group_files_needed.get(gkey, 0) + len(sized)
            )
            members = [tgt.rank_of(s, t, d) for d in range(tgt.dp)]
            layer_resident = 0
            for j, (nbytes, p, kind) in enumerate(sized):
                readers = [members[j % tgt.dp]] if bypass else members
                tensor = None
                for g in readers:
                    tensor = read_tensor(atomic.param_file(p.name, kind))
                    stats.files_read += 1
                    stats.bytes_read += nbytes
                    stats.group_files_read[gkey] = stats.group_files_read.get(gkey, 0) + 1
                    stats.per_rank[g]["files_read"] += 1
                    stats.per_rank[g]["bytes_read"] += nbytes
                # simulated all-gather: every member transiently holds the
                # consolidated tensor before slicing out its fragment
                layer_resident += tensor.numel * tgt.dp
                resident += tensor.numel * tgt.dp
                peak = max(peak, resident)
                for d, g in enumerate(members):
                    meta = rec_by_key[g][(p.name, kind)]
                    frag = extract_fragment(p, tgt, meta, tensor.data)
                    out = Tensor(DType.F32, tuple(frag.shape), frag)
                    if kind == "weight" and dtype is not DType.F32:
                        out = cast(out, dtype)
                    filled[g][(p.name, kind)] = out
            # layer barrier: consolidated buffers for this dp group are
            # released before the next layer starts
            resident -= layer_resident
    stats.peak_resident_elements = peak
    if peak > stats.resident_bound:
        raise CheckpointLayoutError(
            f"loader exceeded its memory bound: {peak} > {stats.resident_bound}"
        )

    shards = {
        g: [
            WorldShard(m, filled[g][(m.param, m.kind)])
            for m in info.records[g]
        ]
        for g in range(tgt.world_size)
    }
    return LoadedWorld(tgt, spec, atomic.step, dict(atomic.metadata), shards, stats)


# ---------------------------------------------------------------------------
# resume
# ---------------------------------------------------------------------------


def resume(
    src_root: str,
    tgt: ParallelConfig,
    scratch: str,
    n_workers: int = 1,
    inner: int = 1,
    dtype: DType = DType.F32,
    bypass: bool = True,
) -> LoadedWorld:
    """Reload a distributed checkpoint under a target config.

    When tgt equals the source config field-wise the shards are read straight
    out of the rank dirs: no atomic files, no conversion (the invocation
    counter in stats stays at zero), scratch untouched. Otherwise the source
    is converted into scratch and loaded from there.
    """
    src = load_checkpoint(src_root)
    validate_model_config(src.spec, tgt)
    before = convert_mod.INVOCATIONS

    if src.cfg == tgt:
        shards: dict[int, list[WorldShard]] = {}
        stats = LoadStats(bypass=bypass)
        stats.resident_bound = resident_bound_elements(src.spec, tgt.dp)
        stats.per_rank = {
            g: {"files_read": 0, "bytes_read": 0} for g in range(tgt.world_size)
        }
        for g in range(tgt.world_size):
            rank_dir = src.rank_dir(g)
            _, records = read_manifest(rank_dir)
            out = []
            for meta in records:
                path = os.path.join(rank_dir, meta.file)
                t = read_tensor(path)
                stats.files_read += 1
                stats.bytes_read += payload_bytes_on_disk(path)
                stats.per_rank[g]["files_read"] += 1
                stats.per_rank[g]["bytes_read"] += payload_bytes_on_disk(path)
                if meta.kind == "weight" and dtype is not DType.F32:
                    t = cast(t, dtype)
                out.append(WorldShard(meta, t))
            shards[g] = out
        stats.conversions_invoked = convert_mod.INVOCATIONS - before
        return LoadedWorld(tgt, src.spec, src.step, dict(src.metadata), shards, stats)

    os.makedirs(scratch, exist_ok=True)
    atomic_dir = os.path.join(scratch, "atomic")
    convert_mod.convert(src_root, atomic_dir, n_workers=n_workers, inner=inner)
    world = load(atomic_dir, tgt, dtype=dtype, bypass=bypass)
    world.stats.conversions_invoked = convert_mod.INVOCATIONS - before
    return world
