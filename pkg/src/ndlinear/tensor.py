"""Dense N-D tensor primitives.

Conventions used throughout the package:

- Tensors are ``numpy.ndarray`` objects with dtype float64 and C
  (row-major, last axis fastest) memory order.
- Operations are pure: inputs are never mutated, and anything that
  rearranges axes materializes a contiguous copy. No lazy views leave
  this module.
- Shapes are tuples of positive ints. ``validate_shape`` enforces the
  rank >= 1 / dims >= 1 / no-overflow invariants.
- Randomness comes from ``make_rng``, a seeded 64-bit PCG64 generator.
  Identical seeds give identical streams within this implementation.
"""

from __future__ import annotations

import math

import numpy as np

# Counting limits. Element counts are bounded by the platform word
# (signed, since they are used as indexes); FLOP/parameter tallies use
# unsigned 64-bit bounds and raise instead of wrapping.
INDEX_MAX = 2**63 - 1
U64_MAX = 2**64 - 1


class ShapeError(ValueError):
    """Raised when a shape, axis list, or dimension does not match."""


def checked_u64(value: int, what: str) -> int:
    """Return ``value`` unchanged unless it falls outside u64 range."""
    if value < 0 or value > U64_MAX:
        raise OverflowError(f"{what} = {value} does not fit in 64 bits")
    return value


def validate_shape(dims) -> tuple[int, ...]:
    """Check a dimension list and return it as a tuple.

    Requires rank >= 1, every dim >= 1, and an element count that fits
    in a platform word.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0:
        raise ShapeError("shape must have rank >= 1")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    count = math.prod(dims)
    if count > INDEX_MAX:
        raise OverflowError(f"element count {count} overflows platform word")
    return dims


def make_rng(seed: int) -> np.random.Generator:
    """Seeded 64-bit PRNG (PCG64) used for every random draw here."""
    return np.random.Generator(np.random.PCG64(seed))


class FlopCounter:
    """Tally of multiply-adds performed by ``matmul`` while active.

    Use as a context manager::

        with FlopCounter() as fc:
            forward(layer, x)
        flops = 2 * fc.multiply_adds

    One (m, k) @ (k, n) product counts m*k*n multiply-adds. The count
    is monotone non-decreasing and checked against u64 range. Only one
    counter may be active at a time; instrumentation is not thread-safe.
    """

    def __init__(self) -> None:
        self.multiply_adds = 0

    def add(self, n: int) -> None:
        self.multiply_adds = checked_u64(self.multiply_adds + n, "multiply_adds")

    def __enter__(self) -> "FlopCounter":
        global _active_counter
        if _active_counter is not None:
            raise RuntimeError("another FlopCounter is already active")
        _active_counter = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_counter
        _active_counter = None


_active_counter: FlopCounter | None = None


def _as_f64(t: np.ndarray) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    return np.ascontiguousarray(arr)


def zeros(shape) -> np.ndarray:
    """All-zero tensor of the given shape."""
    return np.zeros(validate_shape(shape), dtype=np.float64)


def permute(t: np.ndarray, axes) -> np.ndarray:
    """Reorder axes so output axis i is input axis ``axes[i]``.

    Always materializes a fresh contiguous copy, including for the
    identity permutation.
    """
    t = _as_f64(t)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation of 0..{t.ndim - 1}")
    return np.transpose(t, axes).copy(order="C")


def reshape(t: np.ndarray, new_shape) -> np.ndarray:
    """Reinterpret the flat data under a new shape (same element count)."""
    t = _as_f64(t)
    new_shape = validate_shape(new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(
            f"cannot reshape {t.size} elements into {new_shape} "
            f"({math.prod(new_shape)} elements)"
        )
    return t.reshape(new_shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with f64 accumulation.

    Feeds the active FlopCounter, if any, with m*k*n multiply-adds.
    """
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    if _active_counter is not None:
        m, k = a.shape
        n = b.shape[1]
        _active_counter.add(m * k * n)
    return a @ b


def _mode_axes(rank: int, k: int) -> tuple[int, ...]:
    """Permutation moving feature axis k (batch at 0) to the last slot."""
    return tuple(a for a in range(rank) if a != k) + (k,)


def mode_k_product(t: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    """Transform feature mode k of a batched tensor by matrix ``w``.

    ``t`` has shape (B, S_1, ..., S_N) with the batch at axis 0 and mode
    k counted from 1, so mode k lives at array axis k. Every mode-k
    fiber f is replaced by f^T w, resizing that axis from w.shape[0] to
    w.shape[1]. Computed as the permute -> reshape -> matmul ->
    reshape -> inverse-permute sequence, so the result is contiguous.
    """
    t = _as_f64(t)
    w = _as_f64(w)
    if w.ndim != 2:
        raise ShapeError(f"weight must be a matrix, got shape {w.shape}")
    if not 1 <= k <= t.ndim - 1:
        raise ShapeError(f"mode {k} out of range for tensor of rank {t.ndim} (batch at 0)")
    d_k, h_k = w.shape
    if t.shape[k] != d_k:
        raise ShapeError(f"mode {k} has size {t.shape[k]}, weight expects {d_k}")

    axes = _mode_axes(t.ndim, k)
    moved = permute(t, axes)
    rows = t.size // d_k
    mat = reshape(moved, (rows, d_k))
    out_mat = matmul(mat, w)
    out_moved = reshape(out_mat, moved.shape[:-1] + (h_k,))
    inverse = tuple(np.argsort(axes))
    return permute(out_moved, inverse)


def rand_uniform(rng: np.random.Generator, shape, lo: float, hi: float) -> np.ndarray:
    """Tensor of i.i.d. uniform draws in [lo, hi)."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    return rng.uniform(lo, hi, size=validate_shape(shape))
