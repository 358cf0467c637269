"""Dense tensors, deterministic generation, dtype casts, and file I/O.

The on-disk format is a small self-describing container:

    magic   4 bytes  b"UCPT"
    version u16 LE   currently 1
    dtype   u8       0 = f32, 1 = f16, 2 = bf16
    ndim    u8
    dims    ndim x u64 LE
    payload numel * itemsize bytes, row-major, little-endian

bf16 has no native numpy dtype, so bf16 tensors hold their raw bit patterns
in a uint16 array. All casts are explicit; the only supported conversions go
through f32.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    CorruptHeaderError,
    ShapeError,
    TensorFileError,
    TensorIOError,
    TruncatedPayloadError,
    UnsupportedCastError,
)

MAGIC = b"UCPT"
FILE_VERSION = 1

# Sanity cap on element count when reading headers, to reject allocation bombs
# from corrupt dims before any buffer is allocated.
MAX_FILE_NUMEL = 1 << 40


class DType(Enum):
    F32 = 0
    F16 = 1
    BF16 = 2

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @property
    def storage(self) -> np.dtype:
        # bf16 is stored as raw uint16 bit patterns
        if self is DType.F32:
            return np.dtype("<f4")
        if self is DType.F16:
            return np.dtype("<f2")
        return np.dtype("<u2")


_DTYPE_BY_CODE = {d.value: d for d in DType}


@dataclass(frozen=True)
class Tensor:
    """Immutable dense tensor. `data` is a C-contiguous numpy array whose
    numpy dtype matches `dtype.storage`; treat it as read-only."""

    dtype: DType
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if tuple(self.data.shape) != self.shape:
            raise ShapeError(f"data shape {self.data.shape} != {self.shape}")
        if self.data.dtype != self.dtype.storage:
            raise ShapeError(
                f"storage dtype {self.data.dtype} does not match {self.dtype}"
            )

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data).tobytes()

    def bits_equal(self, other: "Tensor") -> bool:
        """Bitwise equality: same dtype, same shape, same payload bytes."""
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )


def make_tensor(dtype: DType, array: np.ndarray) -> Tensor:
    # np.ascontiguousarray would promote rank-0 to rank-1; keep the shape
    arr = np.asarray(array, dtype=dtype.storage)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return Tensor(dtype, tuple(arr.shape), arr)


# ---------------------------------------------------------------------------
# deterministic generation
#
# Element i of gen_tensor(seed, name, tag, shape) is a pure function of its
# arguments, built from integer hashing only, so the result is bit-identical
# on every platform:
#
#   h0   = fnv1a64(utf8(name) + 0x1f + utf8(tag))
#   base = mix64(seed XOR h0)
#   u    = mix64((base + i) mod 2^64)
#   x[i] = ((u >> 40) - 2^23) * 2^-23        as f32, in [-1, 1)
#
# mix64 is the splitmix64 finalizer. The top 24 hash bits become an integer
# in [-2^23, 2^23) scaled by 2^-23, which is exactly representable in f32,
# so no rounding or platform-dependent math is involved.
# ---------------------------------------------------------------------------

_M64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _M64
    return h


def mix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def _mix64_vec(x: np.ndarray) -> np.ndarray:
    # vectorized mix64; uint64 arithmetic wraps mod 2^64 like the scalar form
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stream_base(seed: int, name: str, tag: str) -> int:
    h0 = fnv1a64(name.encode("utf-8") + b"\x1f" + tag.encode("utf-8"))
    return mix64((seed & _M64) ^ h0)


def hash_unit(base: int, start: int, count: int) -> np.ndarray:
    """f32 values in [-1, 1) for flat indices [start, start+count) of a
    stream. Exposed separately from gen_tensor so callers can evaluate an
    index window of a larger logical tensor."""
    if count < 0:
        raise ShapeError("negative count")
    idx = np.arange(start, start + count, dtype=np.uint64) + np.uint64(base)
    u = _mix64_vec(idx) >> np.uint64(40)
    signed = u.astype(np.int64) - (1 << 23)
    return (signed.astype(np.float64) * 2.0**-23).astype(np.float32)


def gen_tensor(seed: int, name: str, tag: str, shape: tuple[int, ...]) -> Tensor:
    """Deterministic pseudo-random f32 tensor in [-1, 1)."""
    for d in shape:
        if d < 0:
            raise ShapeError(f"negative extent in {shape}")
    numel = 1
    for d in shape:
        numel *= d
    base = stream_base(seed, name, tag)
    flat = hash_unit(base, 0, numel)
    return Tensor(DType.F32, tuple(shape), flat.reshape(shape))


# ---------------------------------------------------------------------------
# casts
# ---------------------------------------------------------------------------


def _f32_to_bf16_bits(f32: np.ndarray) -> np.ndarray:
    bits = f32.view(np.uint32)
    # round half to even on the low 16 bits; the carry may propagate into the
    # exponent, which implements overflow-to-inf as a side effect
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) >> np.uint32(16)
    # NaN must stay NaN: the rounding add could carry a NaN into an infinity
    nan = (bits & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    quiet = (bits >> np.uint32(16)) | np.uint32(0x0040)
    return np.where(nan, quiet, rounded).astype(np.uint16)


def _bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def cast(t: Tensor, to: DType) -> Tensor:
    """Cast with round-to-nearest-even. Only conversions through f32 are
    allowed; f16 <-> bf16 directly raises UnsupportedCastError."""
    if t.dtype is to:
        return Tensor(to, t.shape, t.data)
    if t.dtype is not DType.F32 and to is not DType.F32:
        raise UnsupportedCastError(f"cannot cast {t.dtype.name} -> {to.name} directly")
    if t.dtype is DType.F32 and to is DType.F16:
        out = t.data.astype(np.float16)
    elif t.dtype is DType.F32 and to is DType.BF16:
        out = _f32_to_bf16_bits(t.data)
    elif t.dtype is DType.F16 and to is DType.F32:
        out = t.data.astype(np.float32)
    else:  # BF16 -> F32
        out = _bf16_bits_to_f32(t.data)
    return make_tensor(to, out.reshape(t.shape))


# ---------------------------------------------------------------------------
# slicing and concatenation
# ---------------------------------------------------------------------------


def slice_flat(t: Tensor, start: int, end: int) -> Tensor:
    """Contiguous [start, end) window of the row-major flattening; rank-1."""
    if not (0 <= start <= end <= t.numel):
        raise ShapeError(
            f"slice [{start}, {end}) out of bounds for numel {t.numel}"
        )
    flat = t.data.reshape(-1)
    return Tensor(t.dtype, (end - start,), np.ascontiguousarray(flat[start:end]))


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    first = tensors[0]
    if not (0 <= axis < max(len(first.shape), 1)):
        raise ShapeError(f"axis {axis} out of range for shape {first.shape}")
    for t in tensors[1:]:
        if t.dtype is not first.dtype:
            raise ShapeError("concat requires a single dtype")
        if len(t.shape) != len(first.shape):
            raise ShapeError("concat requires equal ranks")
        for ax, (a, b) in enumerate(zip(t.shape, first.shape)):
            if ax != axis and a != b:
                raise ShapeError(
                    f"extent mismatch on axis {ax}: {t.shape} vs {first.shape}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor(first.dtype, tuple(out.shape), np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def write_tensor(path: str, t: Tensor) -> None:
    header = struct.pack("<4sHBB", MAGIC, FILE_VERSION, t.dtype.value, len(t.shape))
    dims = np.asarray(t.shape, dtype="<u8").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(dims)
            f.write(t.tobytes())
    except OSError as e:
        raise TensorIOError(f"writing {path}: {e}") from e


def read_tensor(path: str) -> Tensor:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise TensorIOError(f"reading {path}: {e}") from e

    if len(blob) < 8:
        raise CorruptHeaderError(f"{path}: header shorter than 8 bytes")
    magic, version, code, ndim = struct.unpack_from("<4sHBB", blob, 0)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != FILE_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_BY_CODE:
        raise CorruptHeaderError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_BY_CODE[code]

    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise CorruptHeaderError(f"{path}: truncated dims")
    shape = tuple(
        int(x) for x in np.frombuffer(blob, dtype="<u8", count=ndim, offset=8)
    )
    numel = 1
    for d in shape:
        numel *= d
    if numel > MAX_FILE_NUMEL:
        raise CorruptHeaderError(f"{path}: implausible element count {numel}")

    payload = numel * dtype.itemsize
    if len(blob) < dims_end + payload:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(blob) - dims_end} of {payload} bytes"
        )
    if len(blob) > dims_end + payload:
        raise TensorFileError(
            f"{path}: {len(blob) - dims_end - payload} trailing bytes"
        )
    data = np.frombuffer(
        blob, dtype=dtype.storage, count=numel, offset=dims_end
    ).reshape(shape)
    return Tensor(dtype, shape, data.copy())


def payload_bytes_on_disk(path: str) -> int:
    """Payload size a tensor file contributes to read accounting."""
    try:
        size = os.path.getsize(path)
    except OSError as e:
        raise TensorIOError(f"stat {path}: {e}") from e
    return size
