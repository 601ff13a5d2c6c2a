"""Sliding-window bookkeeping shared by convolutions, soft split and mask activation.

The array-level helpers here work on plain ``numpy`` arrays with arbitrary
leading axes so that the mask code can process thousands of maps at once.
Differentiable wrappers live in :mod:`dmtkit.numerics.ops`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class WindowError(ValueError):
    """Raised when a sliding window does not fit the input it is applied to."""


@dataclass(frozen=True)
class SlidingWindowSpec:
    """Kernel size, stride and zero padding of a square sliding window."""

    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if int(self.kernel) != self.kernel or self.kernel < 1:
            raise WindowError(f"kernel must be a positive integer, got {self.kernel!r}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise WindowError(f"stride must be a positive integer, got {self.stride!r}")
        if int(self.padding) != self.padding or self.padding < 0:
            raise WindowError(f"padding must be a non-negative integer, got {self.padding!r}")

    @classmethod
    def same(cls, kernel: int) -> "SlidingWindowSpec":
        """Stride-1 window padded so an odd kernel preserves spatial size."""
        if kernel % 2 == 0:
            raise WindowError(f"size-preserving window needs an odd kernel, got {kernel}")
        return cls(kernel, 1, (kernel - 1) // 2)

    def output_size(self, extent: int) -> int:
        """Number of window positions along one axis of length ``extent``."""
        span = extent + 2 * self.padding - self.kernel
        if span < 0:
            raise WindowError(
                f"window {self.kernel} does not fit extent {extent} with padding {self.padding}"
            )
        return span // self.stride + 1

    def grid(self, height: int, width: int) -> tuple[int, int]:
        return self.output_size(height), self.output_size(width)

    def count(self, height: int, width: int) -> int:
        oh, ow = self.grid(height, width)
        return oh * ow


def unfold_array(x: np.ndarray, spec: SlidingWindowSpec) -> np.ndarray:
    """``(..., C, H, W) -> (..., C*k*k, N)`` with windows in raster order.

    Rows are ordered channel-major, then kernel row, then kernel column, which
    is what reshaping a ``C x k x k`` window in C order produces.
    """
    *lead, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.grid(h, w)
    if p:
        pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
        x = np.pad(x, pad)
    win = sliding_window_view(x, (k, k), axis=(-2, -1))[..., ::s, ::s, :, :]
    win = win[..., :oh, :ow, :, :]
    # (..., C, oh, ow, k, k) -> (..., C, k, k, oh, ow)
    nd = win.ndim
    order = list(range(nd - 5)) + [nd - 5, nd - 2, nd - 1, nd - 4, nd - 3]
    cols = win.transpose(order)
    return np.ascontiguousarray(cols).reshape(*lead, c * k * k, oh * ow)


def fold_array(cols: np.ndarray, spec: SlidingWindowSpec, out_h: int, out_w: int) -> np.ndarray:
    """Overlap-add inverse layout of :func:`unfold_array`.

    ``(..., C*k*k, N) -> (..., C, out_h, out_w)``; contributions landing in the
    padding border are discarded.
    """
    *lead, rows, n = cols.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.grid(out_h, out_w)
    if n != oh * ow:
        raise WindowError(f"fold expected {oh * ow} columns for {out_h}x{out_w}, got {n}")
    if rows % (k * k):
        raise WindowError(f"fold rows {rows} not divisible by kernel area {k * k}")
    c = rows // (k * k)
    blocks = cols.reshape(*lead, c, k, k, oh, ow)
    canvas = np.zeros((*lead, c, out_h + 2 * p, out_w + 2 * p), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            canvas[..., ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s] += blocks[
                ..., ki, kj, :, :
            ]
    return canvas[..., p : p + out_h, p : p + out_w]


def overlap_count(spec: SlidingWindowSpec, height: int, width: int) -> np.ndarray:
    """How many windows cover each pixel, shape ``(height, width)``."""
    ones = np.ones((1, height, width))
    return fold_array(unfold_array(ones, spec), spec, height, width)[0]
