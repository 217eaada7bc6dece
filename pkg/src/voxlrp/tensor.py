"""Dense N-dimensional float64 arrays and the few primitives built on them.

Arrays are plain numpy ndarrays in row-major (C) order, double precision by
default.  There is no broadcasting in this package's public operations:
shapes are checked explicitly so that mismatches fail loudly instead of
silently broadcasting.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, StateError

Tensor = np.ndarray


def as_tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Return `data` as a C-contiguous float64 array, optionally reshaped.

    Raises ShapeError if a requested shape does not match the element count
    and StateError if any value is non-finite.
    """
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if t.size != int(np.prod(shape)):
            raise ShapeError(f"cannot view {t.size} values as shape {shape}")
        t = t.reshape(shape)
    require_finite(t, "tensor data")
    return t


def require_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t)):
        raise StateError(f"{what} contains non-finite values")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D [M x K] and a 2-D [K x N] array."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    require_finite(out, "matmul result")
    return out


def pad3d(t: Tensor, pad: int | tuple[int, int, int], value: float = 0.0) -> Tensor:
    """Pad the three spatial axes of a [C x D x H x W] array by `pad` on each side."""
    if t.ndim != 4:
        raise ShapeError(f"pad3d needs a 4-axis (C,D,H,W) array, got {t.ndim} axes")
    if isinstance(pad, int):
        pad = (pad, pad, pad)
    if any(p < 0 for p in pad):
        raise ShapeError(f"pad must be non-negative, got {pad}")
    if all(p == 0 for p in pad):
        return t
    width = [(0, 0)] + [(p, p) for p in pad]
    return np.pad(t, width, mode="constant", constant_values=value)


def reduce_sum(t: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    """Sum over the named axes; `axes=None` sums everything to a 0-D array.

    Summing over no axes (`axes=()`) returns an unchanged copy.
    """
    if axes is None:
        return np.asarray(t.sum())
    axes = tuple(int(a) for a in axes)
    for a in axes:
        if not -t.ndim <= a < t.ndim:
            raise ShapeError(f"axis {a} out of range for {t.ndim}-axis array")
    if len(set(a % t.ndim for a in axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axes}")
    if not axes:
        return t.copy()
    return t.sum(axis=axes)
