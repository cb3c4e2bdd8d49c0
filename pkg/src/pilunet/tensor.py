"""Dense array primitives shared by every other module.

Arrays are plain numpy ndarrays in row-major (C) order. The batch layout
convention throughout the package is NHWC: (batch, height, width, channels).
float64 is the reference dtype for correctness checks; float32 is allowed
for training speed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


@dataclass(frozen=True)
class Shape4:
    """Batch-major, channels-last 4-d shape (n, h, w, c)."""

    n: int
    h: int
    w: int
    c: int

    def __post_init__(self):
        for name in ("n", "h", "w", "c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Shape4.{name} must be strictly positive")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.h, self.w, self.c)


def ravel_offset(shape: Sequence[int], coords: Sequence[int]) -> int:
    """Row-major flat offset of ``coords`` in an array of ``shape``."""
    if len(shape) != len(coords):
        raise ValueError("coords rank does not match shape rank")
    offset = 0
    for dim, i in zip(shape, coords):
        if not 0 <= i < dim:
            raise IndexError(f"coordinate {i} out of range for dimension {dim}")
        offset = offset * dim + i
    return offset


def elementwise_map(t: Tensor, f: Callable[[float], float]) -> Tensor:
    """Apply a scalar function elementwise, preserving shape and dtype."""
    t = np.asarray(t)
    return np.vectorize(f, otypes=[t.dtype])(t)


def reduce_mean_spatial(t: Tensor) -> Tensor:
    """Mean over the spatial axes of an NHWC tensor: (n, h, w, c) -> (n, c)."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ValueError(f"expected rank-4 NHWC input, got rank {t.ndim}")
    return t.mean(axis=(1, 2))
