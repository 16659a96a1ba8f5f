"""Sliding-window box sums and means on 2D grids via integral images.

The averaging windows used throughout the pipeline are square w x w windows
with a fixed offset convention: odd w is centered, even w spans offsets
[-w//2, +w//2 - 1] (so w=10 covers [-5, +4]).  Cells outside the grid
contribute zero and the divisor stays w*w everywhere.
"""

from __future__ import annotations

import numpy as np


def window_offsets(w: int) -> tuple[int, int]:
    """Return inclusive (lo, hi) offsets of a w-wide window, hi - lo + 1 == w."""
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    lo = -(w // 2)
    return lo, lo + w - 1


def box_sum_2d(a: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Sum of a over the offset window [lo, hi] x [lo, hi] on the last two axes.

    Out-of-bounds cells contribute zero.  Works on any array of shape
    (..., H, W); the integral image is built in float64 so that sums of
    0/1 grids are exact.
    """
    h, w = a.shape[-2], a.shape[-1]
    # integral image with a zero border: ii[..., i, j] = sum(a[..., :i, :j])
    ii = np.zeros(a.shape[:-2] + (h + 1, w + 1), dtype=np.float64)
    ii[..., 1:, 1:] = np.cumsum(np.cumsum(a, axis=-2, dtype=np.float64), axis=-1)

    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows + lo, 0, h)          # window top (inclusive) clipped
    r1 = np.clip(rows + hi + 1, 0, h)      # window bottom (exclusive)
    c0 = np.clip(cols + lo, 0, w)
    c1 = np.clip(cols + hi + 1, 0, w)

    out = (
        ii[..., r1[:, None], c1[None, :]]
        - ii[..., r0[:, None], c1[None, :]]
        - ii[..., r1[:, None], c0[None, :]]
        + ii[..., r0[:, None], c0[None, :]]
    )
    return out


def box_mean_2d(a: np.ndarray, w: int) -> np.ndarray:
    """w x w sliding mean of a on the last two axes, constant divisor w*w."""
    lo, hi = window_offsets(w)
    return box_sum_2d(a, lo, hi) / float(w * w)


def box_mean_adjoint_2d(g: np.ndarray, w: int) -> np.ndarray:
    """Adjoint of box_mean_2d: <box_mean(a), g> == <a, box_mean_adjoint(g)>.

    The adjoint of a zero-padded window sum over [lo, hi] is the window sum
    over the negated offsets [-hi, -lo].
    """
    lo, hi = window_offsets(w)
    return box_sum_2d(g, -hi, -lo) / float(w * w)
