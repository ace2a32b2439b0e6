"""Dense float32 tensors as plain numpy arrays, plus the helpers every other
module leans on: seeded generators, shape checks, a finite-difference
gradient oracle and the ``APTN`` binary blob format.

Five-axis tensors are laid out ``(batch, channel, time, height, width)``.
The network input written as ``112x112x3x32`` (W x H x C x T) therefore has
shape ``(N, 3, 32, 112, 112)`` here.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

DTYPE = np.float32
MAX_RANK = 5
_INDEX_LIMIT = np.iinfo(np.int64).max

BLOB_MAGIC = b"APTN"
BLOB_VERSION = 1


class ShapeError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class SizeError(ValueError):
    """Element count does not fit the platform index type."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class BlobFormatError(ValueError):
    pass


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _INDEX_LIMIT:
            raise SizeError(f"element count of {dims} overflows int64")
    return dims


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(check_shape(shape), dtype=DTYPE)


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox4x64 generator keyed by ``(seed, *stream)``.

    Independent streams (e.g. per iteration, per layer) are addressed by
    extra integers so that no generator state needs to be carried around.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def random_uniform(shape: Sequence[int], lo: float, hi: float, seed: int) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    dims = check_shape(shape)
    out = rng(seed).uniform(lo, hi, size=dims).astype(DTYPE)
    # float32 rounding can land exactly on hi
    return np.minimum(out, np.nextafter(DTYPE(hi), DTYPE(lo)))


def _binary(a: np.ndarray, b: np.ndarray, op) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return op(a, b).astype(DTYPE, copy=False)


def add(a, b):
    return _binary(a, b, np.add)


def sub(a, b):
    return _binary(a, b, np.subtract)


def mul(a, b):
    return _binary(a, b, np.multiply)


def map_binary(a, b, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    return _binary(a, b, f)


def reduce_sum(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Sum with float64 partials; ``axis=None`` yields a 0-d array."""
    a = np.asarray(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    return np.asarray(a.sum(axis=axis, dtype=np.float64), dtype=DTYPE)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(flat, tuple(shape)))


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64 result).

    ``x`` is perturbed in float64; ``f`` may cast back to float32.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(base))
        flat[i] = old - eps
        fm = float(f(base))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite near element {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``||a-b|| / max(||a||, ||b||)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# -- blob format ------------------------------------------------------------

def write_blob(fh: BinaryIO, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f4")
    dims = check_shape(a.shape)
    fh.write(BLOB_MAGIC)
    fh.write(struct.pack("<II", BLOB_VERSION, len(dims)))
    fh.write(struct.pack(f"<{len(dims)}Q", *dims))
    fh.write(a.tobytes())


def read_blob(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != BLOB_MAGIC:
        raise BlobFormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != BLOB_VERSION:
        raise BlobFormatError(f"unsupported blob version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise BlobFormatError(f"bad rank {rank}")
    dims = check_shape(struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)))
    count = int(np.prod(dims))
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(dims).astype(DTYPE)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise BlobFormatError("truncated blob")
    return buf


def save_tensor(path, a: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_blob(fh, a)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_blob(fh)


def blob_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_blob(buf, a)
    return buf.getvalue()
