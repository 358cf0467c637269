"""Writing and describing distributed checkpoints.

A distributed checkpoint directory looks like:

    out/
      config.json          parallel config + step + metadata
      model.json           the ModelSpec
      rank_0/
        <param>.<kind>.ucpt ...
        shards.json        manifest, written last (tmp + rename commit)
      rank_1/ ...

Rank dirs are independent, so writing them with N workers is embarrassingly
parallel and byte-identical to a sequential write.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import CheckpointLayoutError, ManifestError
from .models import (
    FORMAT_VERSION,
    ModelSpec,
    ModelState,
    spec_from_dict,
    spec_to_dict,
    spec_to_json,
)
from .parallel import (
    ParallelConfig,
    RecordMeta,
    config_from_dict,
    config_to_dict,
    enumerate_rank_records,
    extract_fragment,
    validate_model_config,
)
from .tensor import DType, Tensor, write_tensor

MANIFEST = "shards.json"
CONFIG_JSON = "config.json"
MODEL_JSON = "model.json"


@dataclass(frozen=True)
class DistributedCheckpoint:
    root: str
    cfg: ParallelConfig
    spec: ModelSpec
    step: int
    metadata: dict

    def rank_dir(self, g: int) -> str:
        return os.path.join(self.root, f"rank_{g}")

    def rank_dirs(self) -> list[str]:
        return [self.rank_dir(g) for g in range(self.cfg.world_size)]


def ensure_empty_dir(path: str) -> None:
    if os.path.exists(path):
        if not os.path.isdir(path) or os.listdir(path):
            raise CheckpointLayoutError(f"output dir {path!r} exists and is not empty")
    else:
        os.makedirs(path)


def _write_json(path: str, obj: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def config_json_dict(cfg: ParallelConfig, step: int, metadata: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "parallel": config_to_dict(cfg),
        "step": step,
        "world_size": cfg.world_size,
        "rank_order": "pp,tp,dp",
        "metadata": metadata,
    }


def record_to_entry(meta: RecordMeta) -> dict:
    return {
        "param": meta.param,
        "kind": meta.kind,
        "pattern": meta.pattern,
        "segments": None if meta.segments is None else [list(s) for s in meta.segments],
        "flat_range": None if meta.flat_range is None else list(meta.flat_range),
        "pad_elems": meta.pad_elems,
        "shape": list(meta.shape),
        "dtype": "f32",
        "file": meta.file,
    }


def entry_to_record(entry: dict, placement: tuple[int, int, int]) -> RecordMeta:
    try:
        return RecordMeta(
            param=entry["param"],
            kind=entry["kind"],
            pattern=entry["pattern"],
            placement=placement,
            shape=tuple(int(x) for x in entry["shape"]),
            segments=None
            if entry["segments"] is None
            else tuple((int(a), int(b)) for a, b in entry["segments"]),
            flat_range=None
            if entry["flat_range"] is None
            else (int(entry["flat_range"][0]), int(entry["flat_range"][1])),
            pad_elems=int(entry["pad_elems"]),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ManifestError(f"bad manifest entry: {e}") from e


def _write_rank(state: ModelState, cfg: ParallelConfig, root: str, g: int) -> int:
    """Write one rank dir; returns the number of tensor files written."""
    rank_dir = os.path.join(root, f"rank_{g}")
    os.makedirs(rank_dir, exist_ok=True)
    records = enumerate_rank_records(state.spec, cfg, g)
    entries = []
    for meta in records:
        p = state.spec.param(meta.param)
        full = getattr(state.params[meta.param], meta.kind)
        frag = extract_fragment(p, cfg, meta, full.data)
        write_tensor(
            os.path.join(rank_dir, meta.file),
            Tensor(DType.F32, tuple(frag.shape), frag),
        )
        entries.append(record_to_entry(meta))
    pp_rank, tp_rank, dp_rank = cfg.coords_of(g)
    manifest = {
        "format_version": FORMAT_VERSION,
        "rank": g,
        "placement": {"pp": pp_rank, "tp": tp_rank, "dp": dp_rank},
        "entries": entries,
    }
    _write_json(os.path.join(rank_dir, MANIFEST), manifest)
    return len(entries)


def partition(
    state: ModelState, cfg: ParallelConfig, out_dir: str, workers: int = 1
) -> DistributedCheckpoint:
    """Split a consolidated state into one shard dir per simulated rank.

    Deterministic: the same (state, cfg) produces a byte-identical tree for
    any worker count.
    """
    validate_model_config(state.spec, cfg)
    ensure_empty_dir(out_dir)
    _write_json(os.path.join(out_dir, CONFIG_JSON), config_json_dict(cfg, state.step, state.metadata))
    with open(os.path.join(out_dir, MODEL_JSON), "w") as f:
        f.write(spec_to_json(state.spec))

    ranks = list(range(cfg.world_size))
    if workers <= 1:
        for g in ranks:
            _write_rank(state, cfg, out_dir, g)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_write_rank, state, cfg, out_dir, g) for g in ranks]
            for f in futs:
                f.result()
    return DistributedCheckpoint(out_dir, cfg, state.spec, state.step, dict(state.metadata))


def load_checkpoint(root: str) -> DistributedCheckpoint:
    """Open an existing distributed checkpoint (metadata only)."""
    cpath = os.path.join(root, CONFIG_JSON)
    mpath = os.path.join(root, MODEL_JSON)
    if not os.path.isfile(cpath) or not os.path.isfile(mpath):
        raise CheckpointLayoutError(f"{root!r} lacks {CONFIG_JSON} or {MODEL_JSON}")
    with open(cpath) as f:
        cj = json.load(f)
    with open(mpath) as f:
        spec = spec_from_dict(json.load(f))
    if cj.get("format_version") != FORMAT_VERSION:
        raise CheckpointLayoutError(
            f"{root!r}: unsupported format_version {cj.get('format_version')}"
        )
    cfg = config_from_dict(cj["parallel"])
    ckpt = DistributedCheckpoint(root, cfg, spec, int(cj["step"]), cj.get("metadata", {}))
    missing = [d for d in ckpt.rank_dirs() if not os.path.isdir(d)]
    if missing:
        raise CheckpointLayoutError(f"missing rank dirs: {missing[:3]}")
    return ckpt


def read_manifest(rank_dir: str) -> tuple[dict, list[RecordMeta]]:
    """Parse a rank manifest into records. Raises ManifestError when absent
    or malformed."""
    path = os.path.join(rank_dir, MANIFEST)
    if not os.path.isfile(path):
        raise ManifestError(f"{rank_dir!r} has no {MANIFEST} (empty or torn rank dir)")
    try:
        with open(path) as f:
            m = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"unreadable manifest {path!r}: {e}") from e
    try:
        placement = (m["placement"]["pp"], m["placement"]["tp"], m["placement"]["dp"])
        records = [entry_to_record(e, placement) for e in m["entries"]]
    except (KeyError, TypeError) as e:
        raise ManifestError(f"malformed manifest {path!r}: {e}") from e
    return m, records
