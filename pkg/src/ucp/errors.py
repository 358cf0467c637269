"""Exception types raised across the package.

Everything derives from UcpError so callers can catch broadly; the CLI maps
them to exit code 1 with a short message instead of a traceback.
"""


class UcpError(Exception):
    """Base class for all errors raised by this package."""


class TensorFileError(UcpError):
    """Problem with a tensor file that is not a plain OS failure."""


class CorruptHeaderError(TensorFileError):
    """Magic, version, dtype code, or dims of a tensor file are invalid."""


class TruncatedPayloadError(TensorFileError):
    """Tensor file ends before the payload announced by its header."""


class TensorIOError(TensorFileError):
    """OS-level read/write failure while touching a tensor file."""


class UnsupportedCastError(UcpError):
    """Requested dtype conversion is outside the supported cast set."""


class ShapeError(UcpError):
    """Shape or bounds violation in a tensor operation."""


class ModelConfigError(UcpError):
    """Invalid model family, scale, or trainer configuration."""


class IncompatibleConfigError(UcpError):
    """ParallelConfig violates a compatibility rule, alone or vs a model."""


class PatternCoverageError(UcpError):
    """No partitioning rule covers a (param kind, config) combination."""


class CheckpointLayoutError(UcpError):
    """Checkpoint directory tree is not in the expected state."""


class ManifestError(UcpError):
    """Rank manifest is missing, malformed, or disagrees with its files."""


class MissingFragmentError(UcpError):
    """Union input does not cover the full tensor."""


class OverlappingRangeError(UcpError):
    """Two fragments claim the same elements."""


class ReplicateMismatchError(UcpError):
    """Replicas that must be bit-identical are not (strict mode)."""


class PaddingError(UcpError):
    """Padding tail is nonzero or pad bookkeeping is inconsistent."""
