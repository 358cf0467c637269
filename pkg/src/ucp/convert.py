"""Distributed -> atomic checkpoint conversion.

The engine is a small in-process MapReduce: mapper tasks extract rank dirs
into self-describing FragmentMsgs, a shuffler routes each message to the
reducer group that owns its parameter (ownership comes from an LPT work
plan), and reducer threads union the fragments back into consolidated f32
tensors and save them. Bounded queues connect the stages; the dataflow is
acyclic, every message is counted at emit and consume time, and the output
is byte-identical for any (n_workers, inner) combination because union sorts
its inputs instead of trusting arrival order.

Atomic checkpoints keep one directory per parameter holding weight.ucpt,
adam_m.ucpt, and adam_v.ucpt, all f32, exact ParamSpec shape, with no rank
or partition information anywhere.
"""

from __future__ import annotations

import hashlib
import json
import os
import queue
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointLayoutError,
    ManifestError,
    MissingFragmentError,
    OverlappingRangeError,
    PaddingError,
    ReplicateMismatchError,
    ShapeError,
)
from .models import FORMAT_VERSION, ModelSpec, ParamSpec, STATE_KINDS, spec_from_dict, spec_to_json
from .parallel import (
    PARTIAL,
    REPLICATE,
    SHARD_H,
    SHARD_NC,
    SHARD_V,
    SHARD_HY,
    ParallelConfig,
    RecordMeta,
    tp_fragment_shape,
    tp_mode,
)
from .partition import (
    CONFIG_JSON,
    MODEL_JSON,
    DistributedCheckpoint,
    ensure_empty_dir,
    load_checkpoint,
    read_manifest,
)
from .tensor import DType, Tensor, read_tensor, write_tensor

UCP_META_JSON = "ucp_meta.json"

ATOMIC_FILES = {"weight": "weight.ucpt", "m": "adam_m.ucpt", "v": "adam_v.ucpt"}

# Counts calls into convert(); the lazy resume path must leave it untouched.
INVOCATIONS = 0


def conversions_invoked() -> int:
    """Process-wide count of convert() calls. The package re-exports the
    convert function under the module's own name, so read the counter
    through this accessor rather than as a module attribute."""
    return INVOCATIONS


@dataclass(frozen=True)
class FragmentMsg:
    """One fragment in flight. Self-describing: a reducer needs nothing but
    its messages (plus the global model/config) to rebuild a parameter."""

    meta: RecordMeta
    data: np.ndarray


def extract(rank_dir: str):
    """Yield FragmentMsgs for every entry of a rank manifest, validating
    manifest/file consistency along the way."""
    _, records = read_manifest(rank_dir)
    listed = {m.file for m in records}
    on_disk = {f for f in os.listdir(rank_dir) if f.endswith(".ucpt")}
    if on_disk - listed:
        raise ManifestError(
            f"{rank_dir}: stray tensor files not in manifest: {sorted(on_disk - listed)[:3]}"
        )
    for meta in records:
        path = os.path.join(rank_dir, meta.file)
        if not os.path.isfile(path):
            raise ManifestError(f"{rank_dir}: manifest lists missing file {meta.file}")
        t = read_tensor(path)
        if t.dtype is not DType.F32:
            raise ManifestError(f"{path}: expected f32 payload, got {t.dtype.name}")
        if t.shape != meta.shape:
            raise ManifestError(
                f"{path}: shape {t.shape} disagrees with manifest {meta.shape}"
            )
        yield FragmentMsg(meta, t.data)


# ---------------------------------------------------------------------------
# pattern-aware reassembly
# ---------------------------------------------------------------------------


def strip_pad(flat: np.ndarray, pad_elems: int, target_shape: tuple[int, ...]) -> np.ndarray:
    """Drop the zero pad tail of a flattened tensor and reshape. The tail
    must be exactly pad_elems long and bitwise zero."""
    if flat.ndim != 1:
        raise ShapeError("strip_pad expects a rank-1 array")
    numel = 1
    for d in target_shape:
        numel *= d
    if pad_elems < 0 or numel + pad_elems != flat.size:
        raise PaddingError(
            f"pad arithmetic mismatch: {flat.size} elements != {numel} + pad {pad_elems}"
        )
    if pad_elems and np.any(flat[numel:].view(np.uint32) != 0):
        raise PaddingError(f"nonzero pad tail ({pad_elems} elements)")
    return np.ascontiguousarray(flat[:numel]).reshape(target_shape)


def _ctx(p: ParamSpec, msgs: list[FragmentMsg]) -> str:
    kind = msgs[0].meta.kind if msgs else "?"
    return f"{p.name}.{kind}"


def _collapse_dp(
    p: ParamSpec,
    cfg: ParallelConfig,
    tp_rank: int,
    msgs: list[FragmentMsg],
    mode: str,
    strict: bool,
) -> np.ndarray:
    """Fold the dp axis of one tp rank's messages: either reassemble flat
    ZeRO ranges or verify plain replicas."""
    where = f"{_ctx(p, msgs)} tp_rank {tp_rank}"
    flat = msgs[0].meta.flat_range is not None
    for m in msgs:
        if (m.meta.flat_range is not None) != flat:
            raise ManifestError(f"{where}: mixed flat and non-flat fragments")

    seen = defaultdict(list)
    for m in msgs:
        seen[m.meta.placement[2]].append(m)
    missing = [d for d in range(cfg.dp) if d not in seen]
    if missing:
        raise MissingFragmentError(f"{where}: no fragment from dp ranks {missing}")
    dups = [d for d, group in seen.items() if len(group) > 1 and not flat]
    if dups:
        raise OverlappingRangeError(f"{where}: duplicate fragments from dp ranks {dups}")

    if not flat:
        ordered = [seen[d][0] for d in range(cfg.dp)]
        if strict:
            ref = ordered[0].data.tobytes()
            for m in ordered[1:]:
                if m.data.tobytes() != ref:
                    raise ReplicateMismatchError(
                        f"{where}: dp replicas differ (dp 0 vs dp {m.meta.placement[2]})"
                    )
        return ordered[0].data

    ranged = sorted((m for m in msgs), key=lambda m: m.meta.flat_range)
    pos = 0
    pad = 0
    for m in ranged:
        lo, hi = m.meta.flat_range
        if lo < pos:
            raise OverlappingRangeError(
                f"{where}: flat range [{lo},{hi}) overlaps previous end {pos}"
            )
        if lo > pos:
            raise MissingFragmentError(f"{where}: flat gap [{pos},{lo})")
        if hi - lo != m.data.size:
            raise ManifestError(f"{where}: payload size != flat range extent")
        pos = hi
        if m is not ranged[-1] and m.meta.pad_elems:
            raise PaddingError(f"{where}: pad recorded on a non-final flat shard")
    pad = ranged[-1].meta.pad_elems
    padded = np.concatenate([m.data.reshape(-1) for m in ranged])
    shape = tp_fragment_shape(p, mode, cfg.tp)
    return strip_pad(padded, pad, shape)


def _union_hy(p: ParamSpec, msgs: list[FragmentMsg]) -> np.ndarray:
    """2D block grid reassembly; placement carries (0, row, col)."""
    where = _ctx(p, msgs)
    rows = 1 + max(m.meta.placement[1] for m in msgs)
    cols = 1 + max(m.meta.placement[2] for m in msgs)
    grid: dict[tuple[int, int], np.ndarray] = {}
    for m in msgs:
        pos = (m.meta.placement[1], m.meta.placement[2])
        if pos in grid:
            raise OverlappingRangeError(f"{where}: duplicate block {pos}")
        grid[pos] = m.data
    missing = [
        (r, c) for r in range(rows) for c in range(cols) if (r, c) not in grid
    ]
    if missing:
        raise MissingFragmentError(f"{where}: missing blocks {missing[:4]}")
    out = np.concatenate(
        [np.concatenate([grid[(r, c)] for c in range(cols)], axis=1) for r in range(rows)],
        axis=0,
    )
    if tuple(out.shape) != p.shape:
        raise ShapeError(f"{where}: assembled {tuple(out.shape)} != {p.shape}")
    return np.ascontiguousarray(out)


def union(
    p: ParamSpec, cfg: ParallelConfig, msgs: list[FragmentMsg], strict: bool = True
) -> np.ndarray:
    """Reassemble one (param, state-kind) tensor from its fragments.

    Composition order is fixed: innermost flat ZeRO ranges are concatenated
    and de-padded per tp rank first, then the tp axis is combined by pattern
    (replicas verified bit-equal in strict mode, Partial averaged in f64
    ascending tp rank, shards concatenated), and pp contributes uniqueness
    only. Output order does not depend on message arrival order.
    """
    if not msgs:
        raise MissingFragmentError(f"{p.name}: no fragments at all")
    where = _ctx(p, msgs)
    kinds = {m.meta.kind for m in msgs}
    names = {m.meta.param for m in msgs}
    tags = {m.meta.pattern for m in msgs}
    if len(kinds) != 1 or len(names) != 1 or names != {p.name}:
        raise ManifestError(f"{where}: mixed params/kinds in one union call")
    if len(tags) != 1:
        raise ManifestError(f"{where}: inconsistent pattern tags {sorted(tags)}")
    tag = msgs[0].meta.pattern

    if tag == SHARD_HY:
        return _union_hy(p, msgs)

    stages = {m.meta.placement[0] for m in msgs}
    if len(stages) != 1:
        raise ManifestError(f"{where}: fragments from multiple pp stages {sorted(stages)}")

    # with tp == 1 every tag reduces to the unsharded "full" mode; otherwise
    # the tag names the tp-axis pattern
    mode = "full" if cfg.tp == 1 else tag

    by_tp: dict[int, list[FragmentMsg]] = defaultdict(list)
    for m in msgs:
        by_tp[m.meta.placement[1]].append(m)
    expect = {0} if mode == "full" else set(range(cfg.tp))
    if set(by_tp) != expect:
        raise MissingFragmentError(
            f"{where}: tp ranks {sorted(by_tp)} != expected {sorted(expect)}"
        )

    per_tp = {
        t: _collapse_dp(p, cfg, t, group, mode, strict) for t, group in by_tp.items()
    }

    if mode == "full":
        out = per_tp[0]
    elif mode == REPLICATE:
        ref = per_tp[0]
        if strict:
            for t in range(1, cfg.tp):
                if per_tp[t].tobytes() != ref.tobytes():
                    raise ReplicateMismatchError(
                        f"{where}: tp replicas differ (tp 0 vs tp {t})"
                    )
        out = ref
    elif mode == PARTIAL:
        # f64 mean in fixed ascending tp-rank order
        acc = per_tp[0].astype(np.float64)
        for t in range(1, cfg.tp):
            acc = acc + per_tp[t].astype(np.float64)
        out = (acc / float(cfg.tp)).astype(np.float32)
    elif mode == SHARD_V:
        out = np.concatenate([per_tp[t] for t in range(cfg.tp)], axis=0)
    elif mode == SHARD_H:
        out = np.concatenate([per_tp[t] for t in range(cfg.tp)], axis=1)
    elif mode == SHARD_NC:
        segs = msgs[0].meta.segments
        if segs is None or tuple(segs) != tuple(p.nc_segments or ()):
            raise ManifestError(f"{where}: nc segments disagree with the model spec")
        # rank fragments stack the per-segment slices in segment order, so
        # the s-th slice of rank t starts at the cumulative slice rows
        seg_rows = [length // cfg.tp for _, length in segs]
        out_parts = []
        base = 0
        for rows in seg_rows:
            for t in range(cfg.tp):
                out_parts.append(per_tp[t][base : base + rows])
            base += rows
        out = np.concatenate(out_parts, axis=0)
    else:
        raise ManifestError(f"{where}: unknown pattern tag {tag!r}")

    if tuple(out.shape) != p.shape:
        raise ShapeError(f"{where}: assembled {tuple(out.shape)} != spec {p.shape}")
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------------------
# work planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkPlan:
    groups: tuple[tuple[str, ...], ...]
    loads: tuple[int, ...]

    def owner(self, param: str) -> int:
        for gi, group in enumerate(self.groups):
            if param in group:
                return gi
        raise KeyError(param)


def plan_work(spec: ModelSpec, n_groups: int) -> WorkPlan:
    """Split params into n_groups by LPT greedy balancing on numel: sort
    descending (ties by name), assign each to the currently lightest group
    (ties to the lowest group index)."""
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    order = sorted(spec.params, key=lambda p: (-p.numel, p.name))
    groups: list[list[str]] = [[] for _ in range(n_groups)]
    loads = [0] * n_groups
    for p in order:
        gi = min(range(n_groups), key=lambda i: (loads[i], i))
        groups[gi].append(p.name)
        loads[gi] += p.numel
    return WorkPlan(tuple(tuple(g) for g in groups), tuple(loads))


# ---------------------------------------------------------------------------
# atomic checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomicCheckpoint:
    root: str
    spec: ModelSpec
    step: int
    metadata: dict
    source_fingerprint: str

    def param_file(self, param: str, kind: str) -> str:
        return os.path.join(self.root, param, ATOMIC_FILES[kind])

    def read_param(self, param: str) -> dict[str, Tensor]:
        p = self.spec.param(param)
        out = {}
        for kind in STATE_KINDS:
            t = read_tensor(self.param_file(param, kind))
            if t.dtype is not DType.F32 or t.shape != p.shape:
                raise CheckpointLayoutError(
                    f"{param}.{kind}: expected f32 {p.shape}, got {t.dtype.name} {t.shape}"
                )
            out[kind] = t
        return out


def source_fingerprint(src_root: str) -> str:
    with open(os.path.join(src_root, CONFIG_JSON), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_atomic(root: str) -> AtomicCheckpoint:
    mpath = os.path.join(root, MODEL_JSON)
    upath = os.path.join(root, UCP_META_JSON)
    if not os.path.isfile(upath) or not os.path.isfile(mpath):
        raise CheckpointLayoutError(
            f"{root!r} is not a complete atomic checkpoint (missing metadata)"
        )
    with open(mpath) as f:
        spec = spec_from_dict(json.load(f))
    with open(upath) as f:
        meta = json.load(f)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointLayoutError(
            f"{root!r}: unsupported format_version {meta.get('format_version')}"
        )
    names = {p.name for p in spec.params}
    have = {
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    }
    if have != names:
        raise CheckpointLayoutError(
            f"{root!r}: param dirs disagree with model.json "
            f"(missing {sorted(names - have)[:3]}, extra {sorted(have - names)[:3]})"
        )
    return AtomicCheckpoint(
        root, spec, int(meta["step"]), meta.get("metadata", {}),
        meta.get("source_config_sha256", ""),
    )


# ---------------------------------------------------------------------------
# the conversion pipeline
# ---------------------------------------------------------------------------

_RANK_DONE = object()


@dataclass
class ConvertStats:
    messages_emitted: int = 0
    messages_consumed: int = 0
    params_written: int = 0


def convert(
    src: str,
    out_dir: str,
    n_workers: int = 1,
    inner: int = 1,
    strict_replicate: bool = True,
) -> AtomicCheckpoint:
    """Convert a distributed checkpoint into an atomic one.

    n_workers sets both the mapper pool width and the reducer group count
    (outer parallelism over parameter groups); inner parallelizes union work
    across params within one group. Output bytes do not depend on either.
    """
    global INVOCATIONS
    INVOCATIONS += 1
    if n_workers < 1 or inner < 1:
        raise ValueError("n_workers and inner must be >= 1")
    ckpt = load_checkpoint(src)
    spec, cfg = ckpt.spec, ckpt.cfg
    fingerprint = source_fingerprint(src)
    ensure_empty_dir(out_dir)

    plan = plan_work(spec, n_workers)
    owner = {name: gi for gi, group in enumerate(plan.groups) for name in group}
    n_ranks = cfg.world_size
    queues: list[queue.Queue] = [queue.Queue(maxsize=64) for _ in plan.groups]
    stats = ConvertStats()
    emit_lock = threading.Lock()
    errors: list[BaseException] = []
    err_lock = threading.Lock()

    def record_error(e: BaseException) -> None:
        with err_lock:
            errors.append(e)

    def mapper(rank_dir: str) -> None:
        # the shuffler is this routing loop: each message goes to the queue
        # of the reducer group owning its param
        emitted = 0
        try:
            for msg in extract(rank_dir):
                queues[owner[msg.meta.param]].put(msg)
                emitted += 1
        except BaseException as e:
            record_error(e)
        finally:
            with emit_lock:
                stats.messages_emitted += emitted
            for q in queues:
                q.put(_RANK_DONE)

    def write_union(param: str, bucket: dict[str, list[FragmentMsg]]) -> None:
        p = spec.param(param)
        pdir = os.path.join(out_dir, param)
        os.makedirs(pdir, exist_ok=True)
        for kind in STATE_KINDS:
            msgs = bucket.get(kind)
            if not msgs:
                raise MissingFragmentError(f"{param}.{kind}: no fragments arrived")
            arr = union(p, cfg, msgs, strict=strict_replicate)
            write_tensor(
                os.path.join(pdir, ATOMIC_FILES[kind]),
                Tensor(DType.F32, tuple(arr.shape), arr),
            )

    def reducer(gi: int) -> None:
        buckets: dict[str, dict[str, list[FragmentMsg]]] = defaultdict(
            lambda: defaultdict(list)
        )
        consumed = 0
        done = 0
        q = queues[gi]
        while done < n_ranks:
            item = q.get()
            if item is _RANK_DONE:
                done += 1
                continue
            consumed += 1
            buckets[item.meta.param][item.meta.kind].append(item)
        with emit_lock:
            stats.messages_consumed += consumed
        if errors:
            return  # a mapper already failed; keep the tree torn
        todo = [name for name in plan.groups[gi] if name in buckets]
        missing = [name for name in plan.groups[gi] if name not in buckets]
        if missing:
            record_error(
                MissingFragmentError(f"no fragments at all for params {missing[:3]}")
            )
        try:
            if inner <= 1:
                for name in todo:
                    write_union(name, buckets[name])
            else:
                with ThreadPoolExecutor(max_workers=inner) as pool:
                    futs = {
                        pool.submit(write_union, name, buckets[name]): name
                        for name in todo
                    }
                    for f in futs:
                        f.result()
            with emit_lock:
                stats.params_written += len(todo)
        except BaseException as e:
            record_error(e)

    reducers = [threading.Thread(target=reducer, args=(gi,)) for gi in range(len(plan.groups))]
    for t in reducers:
        t.start()
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        list(pool.map(mapper, [ckpt.rank_dir(g) for g in range(n_ranks)]))
    for t in reducers:
        t.join()

    if errors:
        raise errors[0]
    if stats.messages_emitted != stats.messages_consumed:
        raise ManifestError(
            f"pipeline lost messages: emitted {stats.messages_emitted}, "
            f"consumed {stats.messages_consumed}"
        )
    if stats.params_written != len(spec.params):
        raise ManifestError(
            f"wrote {stats.params_written} params, expected {len(spec.params)}"
        )

    # metadata goes last so a torn conversion is never mistaken for a
    # complete checkpoint
    with open(os.path.join(out_dir, MODEL_JSON), "w") as f:
        f.write(spec_to_json(spec))
    meta = {
        "format_version": FORMAT_VERSION,
        "step": ckpt.step,
        "metadata": ckpt.metadata,
        "source_config_sha256": fingerprint,
    }
    mtmp = os.path.join(out_dir, UCP_META_JSON + ".tmp")
    with open(mtmp, "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    os.replace(mtmp, os.path.join(out_dir, UCP_META_JSON))
    return AtomicCheckpoint(out_dir, spec, ckpt.step, dict(ckpt.metadata), fingerprint)
