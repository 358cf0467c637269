"""Reference consolidation, kept deliberately independent of the engine.

This module inverts each partitioning pattern from first principles: it
allocates the full tensor and writes every fragment's elements into their
destination indices, tracking coverage with a boolean mask. It never calls
the engine's union/strip code (different module, different structure), so
agreement between `convert` and this oracle is evidence, not tautology.

Works either from a distributed checkpoint directory (manifests parsed
directly) or from an in-memory LoadedWorld.
"""

from __future__ import annotations

import json
import os

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
from .models import ModelState, ModelSpec, ParamSpec, ParamState, spec_from_dict
from .tensor import DType, Tensor, read_tensor

_KINDS = ("weight", "m", "v")


class _Frag:
    """One fragment as the oracle sees it: manifest fields plus payload."""

    def __init__(self, pattern, placement, flat_range, pad_elems, segments, data):
        self.pattern = pattern
        self.placement = tuple(placement)  # (pp, tp, dp)
        self.flat_range = flat_range
        self.pad_elems = pad_elems
        self.segments = segments
        self.data = data


def _collapse_dp_oracle(name: str, p: ParamSpec, frags: list[_Frag], ntp: int) -> np.ndarray:
    """Resolve the dp axis of one tp rank: stitch flat ranges by index, or
    verify replicas bitwise and keep the lowest dp rank."""
    flat = frags[0].flat_range is not None
    if not flat:
        frags = sorted(frags, key=lambda f: f.placement[2])
        ref = frags[0].data
        for f in frags[1:]:
            if not np.array_equal(
                ref.view(np.uint32).reshape(-1), f.data.view(np.uint32).reshape(-1)
            ):
                raise ReplicateMismatchError(
                    f"{name}: dp copies differ at dp {f.placement[2]}"
                )
        return ref

    total = max(f.flat_range[1] for f in frags)
    buf = np.zeros(total, dtype=np.float32)
    seen = np.zeros(total, dtype=bool)
    pad = 0
    for f in frags:
        lo, hi = f.flat_range
        if hi - lo != f.data.size:
            raise ManifestError(f"{name}: flat payload size != range")
        if seen[lo:hi].any():
            raise OverlappingRangeError(f"{name}: flat overlap at [{lo},{hi})")
        buf[lo:hi] = f.data.reshape(-1)
        seen[lo:hi] = True
        if hi == total:
            pad = f.pad_elems
        elif f.pad_elems:
            raise PaddingError(f"{name}: pad on an interior flat shard")
    if not seen.all():
        raise MissingFragmentError(f"{name}: flat coverage has gaps")
    keep = total - pad
    if pad and buf[keep:].view(np.uint32).any():
        raise PaddingError(f"{name}: nonzero pad tail")
    frag = buf[:keep]

    # reshape the stitched flat back into the tp fragment by pattern
    tag = frags[0].pattern
    if tag in ("replicate", "partial") or ntp == 1:
        return frag.reshape(p.shape)
    if tag == "shard_v":
        return frag.reshape((p.shape[0] // ntp,) + p.shape[1:])
    if tag == "shard_h":
        return frag.reshape(p.shape[:1] + (p.shape[1] // ntp,) + p.shape[2:])
    if tag == "shard_nc":
        rows = sum(length // ntp for _, length in frags[0].segments)
        return frag.reshape((rows,) + p.shape[1:])
    raise ManifestError(f"{name}: cannot unflatten pattern {tag!r}")


def _rebuild_param(name: str, p: ParamSpec, frags: list[_Frag]) -> np.ndarray:
    if not frags:
        raise MissingFragmentError(f"{name}: nothing to consolidate")
    tags = {f.pattern for f in frags}
    if len(tags) != 1:
        raise ManifestError(f"{name}: mixed pattern tags {sorted(tags)}")
    tag = tags.pop()

    tp_ranks = sorted({f.placement[1] for f in frags})
    ntp = len(tp_ranks)
    per_tp = {}
    for t in tp_ranks:
        per_tp[t] = _collapse_dp_oracle(
            name, p, [f for f in frags if f.placement[1] == t], ntp
        )

    if tag in ("unique", "replicate"):
        ref = per_tp[tp_ranks[0]]
        for t in tp_ranks[1:]:
            if not np.array_equal(
                ref.view(np.uint32).reshape(-1),
                per_tp[t].view(np.uint32).reshape(-1),
            ):
                raise ReplicateMismatchError(f"{name}: tp copies differ at tp {t}")
        out = ref
    elif tag == "partial":
        acc = per_tp[tp_ranks[0]].astype(np.float64)
        for t in tp_ranks[1:]:
            acc = acc + per_tp[t].astype(np.float64)
        out = (acc / float(ntp)).astype(np.float32)
    elif tag == "shard_v":
        out = np.zeros(p.shape, dtype=np.float32)
        rows = p.shape[0] // ntp
        for i, t in enumerate(tp_ranks):
            if per_tp[t].shape[0] != rows:
                raise ShapeError(f"{name}: shard_v fragment rows != {rows}")
            out[i * rows : (i + 1) * rows] = per_tp[t]
    elif tag == "shard_h":
        out = np.zeros(p.shape, dtype=np.float32)
        cols = p.shape[1] // ntp
        for i, t in enumerate(tp_ranks):
            out[:, i * cols : (i + 1) * cols] = per_tp[t]
    elif tag == "shard_nc":
        segs = frags[0].segments
        if not segs:
            raise ManifestError(f"{name}: shard_nc without segments")
        out = np.zeros(p.shape, dtype=np.float32)
        for i, t in enumerate(tp_ranks):
            src_base = 0
            frag = per_tp[t]
            for start, length in segs:
                rows = length // ntp
                dst = start + i * rows
                out[dst : dst + rows] = frag[src_base : src_base + rows]
                src_base += rows
    else:
        raise ManifestError(f"{name}: oracle does not invert pattern {tag!r}")

    if tuple(out.shape) != p.shape:
        raise ShapeError(f"{name}: rebuilt {tuple(out.shape)} != {p.shape}")
    return np.ascontiguousarray(out, dtype=np.float32)


def _consolidate(spec: ModelSpec, step: int, metadata: dict, frags_by_key) -> ModelState:
    params: dict[str, ParamState] = {}
    for p in spec.params:
        tensors = {}
        for kind in _KINDS:
            frags = frags_by_key.get((p.name, kind), [])
            arr = _rebuild_param(f"{p.name}.{kind}", p, frags)
            tensors[kind] = Tensor(DType.F32, p.shape, arr)
        params[p.name] = ParamState(tensors["weight"], tensors["m"], tensors["v"])
    return ModelState(spec, params, step, dict(metadata))


def consolidate_oracle(ckpt_root: str) -> ModelState:
    """Single-threaded manifest-driven consolidation of a distributed
    checkpoint directory."""
    with open(os.path.join(ckpt_root, "config.json")) as f:
        cj = json.load(f)
    with open(os.path.join(ckpt_root, "model.json")) as f:
        spec = spec_from_dict(json.load(f))
    world = int(cj["world_size"])

    frags_by_key: dict[tuple[str, str], list[_Frag]] = {}
    for g in range(world):
        rank_dir = os.path.join(ckpt_root, f"rank_{g}")
        mpath = os.path.join(rank_dir, "shards.json")
        if not os.path.isfile(mpath):
            raise ManifestError(f"{rank_dir}: missing shards.json")
        with open(mpath) as f:
            manifest = json.load(f)
        pl = manifest["placement"]
        placement = (pl["pp"], pl["tp"], pl["dp"])
        for e in manifest["entries"]:
            t = read_tensor(os.path.join(rank_dir, e["file"]))
            if t.dtype is not DType.F32:
                raise CheckpointLayoutError(f"{e['file']}: oracle expects f32 shards")
            frag = _Frag(
                pattern=e["pattern"],
                placement=placement,
                flat_range=None if e["flat_range"] is None else tuple(e["flat_range"]),
                pad_elems=int(e["pad_elems"]),
                segments=None
                if e["segments"] is None
                else tuple((int(a), int(b)) for a, b in e["segments"]),
                data=t.data,
            )
            frags_by_key.setdefault((e["param"], e["kind"]), []).append(frag)

    return _consolidate(spec, int(cj["step"]), cj.get("metadata", {}), frags_by_key)


def consolidate_world(world) -> ModelState:
    """Consolidate an in-memory LoadedWorld (f32 worlds only)."""
    frags_by_key: dict[tuple[str, str], list[_Frag]] = {}
    for g, shards in world.shards.items():
        for s in shards:
            if s.tensor.dtype is not DType.F32:
                raise CheckpointLayoutError(
                    "oracle consolidation supports f32 worlds only"
                )
            m = s.meta
            frags_by_key.setdefault((m.param, m.kind), []).append(
                _Frag(m.pattern, m.placement, m.flat_range, m.pad_elems, m.segments, s.tensor.data)
            )
    return _consolidate(world.spec, world.step, world.metadata, frags_by_key)
