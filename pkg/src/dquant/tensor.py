"""Dense tensors and axis decomposition.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order.  This
module provides the slicing used by depthwise quantization: a tensor is cut
into ``M`` equal slices along one axis, zero-padding the last slice when the
extent does not divide evenly, and the slices can be put back together
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AxisDecomposition",
    "as_tensor",
    "decompose",
    "reassemble",
    "positions_as_vectors",
    "vectors_to_positions",
]


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate external input and return a C-contiguous float array.

    Raises ``ValueError`` if any element is NaN or infinite.
    """
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        raise ValueError("tensor must have rank >= 1")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class AxisDecomposition:
    """How a tensor was split along ``axis`` into ``num_slices`` pieces."""

    axis: int
    num_slices: int
    slice_extent: int
    pad: int
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.original_extent + self.pad != self.num_slices * self.slice_extent:
            raise ValueError("inconsistent decomposition extents")
        if not 0 <= self.pad < self.slice_extent:
            raise ValueError("padding must be smaller than one slice")

    @property
    def original_extent(self) -> int:
        return self.shape[self.axis]

    @property
    def padded_extent(self) -> int:
        return self.num_slices * self.slice_extent

    def slice_shape(self) -> tuple[int, ...]:
        s = list(self.shape)
        s[self.axis] = self.slice_extent
        return tuple(s)

    def valid_mask(self) -> np.ndarray:
        """Boolean mask over the padded axis, ``(M, D)``; False marks padding."""
        m = np.ones(self.padded_extent, dtype=bool)
        if self.pad:
            m[-self.pad:] = False
        return m.reshape(self.num_slices, self.slice_extent)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def decompose(t, axis: int, M: int) -> tuple[list[np.ndarray], AxisDecomposition]:
    """Split ``t`` into ``M`` slices of extent ``ceil(n / M)`` along ``axis``.

    The final slice is zero-padded when ``n`` is not a multiple of ``M``.

    >>> slices, d = decompose(np.zeros((512, 7, 7)), 0, 7)
    >>> slices[0].shape, d.pad
    ((74, 7, 7), 6)
    """
    t = np.asarray(t)
    axis = _normalize_axis(axis, t.ndim)
    if M < 1:
        raise ValueError("M must be >= 1")
    n = t.shape[axis]
    if M > n:
        raise ValueError(f"cannot split extent {n} into {M} slices")
    D = -(-n // M)
    pad = M * D - n
    if pad >= D:
        raise ValueError(f"extent {n} with M={M} leaves an all-padding slice (D={D}, pad={pad})")
    d = AxisDecomposition(axis=axis, num_slices=M, slice_extent=D, pad=pad, shape=tuple(t.shape))
    slices = []
    for i in range(M):
        lo, hi = i * D, min((i + 1) * D, n)
        idx = [slice(None)] * t.ndim
        idx[axis] = slice(lo, hi)
        piece = t[tuple(idx)]
        if hi - lo < D:
            widths = [(0, 0)] * t.ndim
            widths[axis] = (0, D - (hi - lo))
            piece = np.pad(piece, widths)
        slices.append(np.ascontiguousarray(piece))
    return slices, d


def reassemble(slices, d: AxisDecomposition) -> np.ndarray:
    """Concatenate slices along the decomposition axis and trim the padding."""
    if len(slices) != d.num_slices:
        raise ValueError(f"expected {d.num_slices} slices, got {len(slices)}")
    expected = d.slice_shape()
    for i, s in enumerate(slices):
        if tuple(np.shape(s)) != expected:
            raise ValueError(f"slice {i} has shape {np.shape(s)}, expected {expected}")
    full = np.concatenate(slices, axis=d.axis)
    if d.pad:
        idx = [slice(None)] * full.ndim
        idx[d.axis] = slice(0, d.original_extent)
        full = full[tuple(idx)]
    return np.ascontiguousarray(full)


def positions_as_vectors(s, axis: int) -> np.ndarray:
    """Flatten every non-axis position of ``s`` into one row: ``(P, D)``."""
    s = np.asarray(s)
    axis = _normalize_axis(axis, s.ndim)
    return np.moveaxis(s, axis, -1).reshape(-1, s.shape[axis])


def vectors_to_positions(v, shape, axis: int) -> np.ndarray:
    """Inverse of :func:`positions_as_vectors` for a target ``shape``."""
    shape = tuple(shape)
    axis = _normalize_axis(axis, len(shape))
    moved = shape[:axis] + shape[axis + 1:] + (shape[axis],)
    return np.ascontiguousarray(np.moveaxis(np.asarray(v).reshape(moved), -1, axis))
