"""Simulated distributed checkpoints: partition, convert, reload.

Partition a deterministic model state across a simulated dp/tp/pp world
into per-rank shard files, convert those shards into parallelism-agnostic
per-parameter files, and reload under any compatible configuration with
bit-exact results. See the README for the layout on disk.
"""

from .bench import BenchReport, BenchRow, bench, render_bench_table, write_bench_csv
from .convert import (
    AtomicCheckpoint,
    WorkPlan,
    conversions_invoked,
    convert,
    load_atomic,
    plan_work,
    union,
)
from .errors import (
    CheckpointLayoutError,
    CorruptHeaderError,
    IncompatibleConfigError,
    ManifestError,
    MissingFragmentError,
    ModelConfigError,
    OverlappingRangeError,
    PaddingError,
    PatternCoverageError,
    ReplicateMismatchError,
    ShapeError,
    TensorFileError,
    TensorIOError,
    TruncatedPayloadError,
    UcpError,
    UnsupportedCastError,
)
from .load import LoadedWorld, LoadStats, UcpInfo, WorldShard, load, resume, ucp_info
from .models import (
    FAMILIES,
    ModelSpec,
    ModelState,
    ParamKind,
    ParamSpec,
    ParamState,
    TrainerConfig,
    first_diff,
    init_state,
    make_model,
    states_equal,
    train_steps,
)
from .oracle import consolidate_oracle, consolidate_world
from .parallel import (
    ParallelConfig,
    PPSchedule,
    RecordMeta,
    ZeroStage,
    enumerate_rank_records,
    format_config_string,
    parse_config_string,
)
from .partition import DistributedCheckpoint, load_checkpoint, partition
from .tensor import DType, Tensor, cast, gen_tensor, make_tensor, read_tensor, write_tensor
from .verify import (
    GridCell,
    GridSpec,
    VerifyReport,
    default_grids,
    merge_reports,
    render_verify_table,
    verify_roundtrip,
    write_verify_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AtomicCheckpoint",
    "BenchReport",
    "BenchRow",
    "CheckpointLayoutError",
    "CorruptHeaderError",
    "DType",
    "DistributedCheckpoint",
    "FAMILIES",
    "GridCell",
    "GridSpec",
    "IncompatibleConfigError",
    "LoadStats",
    "LoadedWorld",
    "ManifestError",
    "MissingFragmentError",
    "ModelConfigError",
    "ModelSpec",
    "ModelState",
    "OverlappingRangeError",
    "PPSchedule",
    "PaddingError",
    "ParallelConfig",
    "ParamKind",
    "ParamSpec",
    "ParamState",
    "PatternCoverageError",
    "RecordMeta",
    "ReplicateMismatchError",
    "ShapeError",
    "Tensor",
    "TensorFileError",
    "TensorIOError",
    "TrainerConfig",
    "TruncatedPayloadError",
    "UcpError",
    "UcpInfo",
    "UnsupportedCastError",
    "VerifyReport",
    "WorkPlan",
    "WorldShard",
    "bench",
    "cast",
    "consolidate_oracle",
    "consolidate_world",
    "conversions_invoked",
    "convert",
    "default_grids",
    "enumerate_rank_records",
    "first_diff",
    "format_config_string",
    "gen_tensor",
    "init_state",
    "load",
    "load_atomic",
    "load_checkpoint",
    "make_model",
    "make_tensor",
    "merge_reports",
    "parse_config_string",
    "partition",
    "plan_work",
    "read_tensor",
    "render_bench_table",
    "render_verify_table",
    "resume",
    "states_equal",
    "train_steps",
    "ucp_info",
    "union",
    "verify_roundtrip",
    "write_bench_csv",
    "write_tensor",
    "write_verify_csv",
]
