"""Validity masks: downscaling, token selection, mask activation and mask generators.

Masks use 1 for a valid (known) pixel and 0 for a hole. They are plain
``numpy`` arrays shaped ``(..., H, W)``; a single map is usually ``1 x H x W``
and a sequence of T maps ``T x 1 x H x W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SlidingWindowSpec, Tensor, WindowError, fold_array, ops, unfold_array


class MaskError(ValueError):
    """Invalid mask shape or mask-generation request."""


def as_mask(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise MaskError("mask values must be exactly 0 or 1")
    return arr


def validity_fraction(m) -> float:
    """Share of cells equal to 1."""
    arr = np.asarray(m)
    return float(np.count_nonzero(arr == 1)) / arr.size if arr.size else 0.0


def downscale_mask(m, factor: int) -> np.ndarray:
    """Any-valid pooling over ``factor x factor`` blocks of the last two axes."""
    arr = as_mask(m)
    *lead, h, w = arr.shape
    if h % factor or w % factor:
        raise MaskError(f"mask {h}x{w} is not divisible by {factor}")
    blocks = arr.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.max(axis=(-3, -1))


def mask_update(m, spec: SlidingWindowSpec) -> np.ndarray:
    """Mask activation: any window holding a valid pixel becomes fully valid.

    Tokenise the map with ``spec``, set every column with positive sum to all
    ones, overlap-add the columns back and clamp to ``[0, 1]``. Works on any
    stack of maps ``(..., C, H, W)``; windows span all C channels.
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim < 3:
        raise MaskError(f"mask_update needs (..., C, H, W), got shape {arr.shape}")
    h, w = arr.shape[-2:]
    try:
        cols = unfold_array(arr, spec)
    except WindowError as exc:
        raise MaskError(f"degenerate window {spec} for a {h}x{w} mask") from exc
    alive = cols.sum(axis=-2, keepdims=True) > 0
    cols = np.broadcast_to(alive, cols.shape).astype(np.float64)
    return np.clip(fold_array(cols, spec, h, w), 0.0, 1.0)


@dataclass
class TokenBatch:
    """Valid-only tokens plus the grid cell ``(t, y, x)`` each came from."""

    tokens: Tensor
    index_map: np.ndarray  # (N', 3) int
    grid_dims: tuple[int, int, int]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def flat_index(self) -> np.ndarray:
        t, hg, wg = self.grid_dims
        idx = self.index_map
        return (idx[:, 0] * hg + idx[:, 1]) * wg + idx[:, 2]

    def with_tokens(self, tokens: Tensor) -> "TokenBatch":
        return TokenBatch(tokens, self.index_map, self.grid_dims)


def valid_cells(m) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Flat indices and ``(t, y, x)`` of valid cells of a ``T x 1 x H x W`` (or ``T x H x W``) mask."""
    arr = np.asarray(m)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise MaskError(f"expected single-channel masks, got {arr.shape}")
        arr = arr[:, 0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise MaskError(f"cannot read grid mask of shape {arr.shape}")
    flat = np.flatnonzero(arr.reshape(-1) == 1)
    return flat, arr.shape


def token_select(features: Tensor, m) -> TokenBatch:
    """Gather the rows of ``features`` (N x d, frame-then-raster order) at valid cells."""
    flat, dims = valid_cells(m)
    n = int(np.prod(dims))
    if features.ndim != 2 or features.shape[0] != n:
        raise MaskError(f"{features.shape[0] if features.ndim else 0} tokens for a grid of {n} cells")
    t_idx, rem = np.divmod(flat, dims[1] * dims[2])
    y_idx, x_idx = np.divmod(rem, dims[2])
    index_map = np.stack([t_idx, y_idx, x_idx], axis=1).astype(np.int64)
    return TokenBatch(ops.take_rows(features, flat), index_map, tuple(int(v) for v in dims))


def token_scatter(batch: TokenBatch, d_out: int | None = None) -> Tensor:
    """Put tokens back on a ``T x d x H_g x W_g`` grid with exact zeros elsewhere."""
    t, hg, wg = batch.grid_dims
    d = batch.tokens.shape[1] if batch.tokens.ndim == 2 else (d_out or 0)
    if d_out is not None and d_out != d:
        raise MaskError(f"token width {d} differs from requested {d_out}")
    tokens = batch.tokens if batch.tokens.ndim == 2 else Tensor(np.zeros((0, d)))
    full = ops.scatter_rows(tokens, batch.flat_index, t * hg * wg)
    return ops.transpose(ops.reshape(full, (t, hg, wg, d)), (0, 3, 1, 2))


def grid_to_tokens(grid: Tensor) -> Tensor:
    """``T x d x H x W -> (T*H*W) x d`` in frame-then-raster order."""
    t, d, h, w = grid.shape
    return ops.reshape(ops.transpose(grid, (0, 2, 3, 1)), (t * h * w, d))


def tokens_to_grid(tokens: Tensor, grid_dims: tuple[int, int, int]) -> Tensor:
    t, h, w = grid_dims
    d = tokens.shape[1]
    return ops.transpose(ops.reshape(tokens, (t, h, w, d)), (0, 3, 1, 2))


# -- generators ---------------------------------------------------------------


def _stroke_pixels(h: int, w: int, points: np.ndarray, radius: float) -> np.ndarray:
    """Boolean map of pixels within ``radius`` of the polyline ``points``."""
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    hit = np.zeros(h * w, dtype=bool)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(len(pix)) if denom == 0 else np.clip(((pix - a) @ ab) / denom, 0.0, 1.0)
        nearest = a + t[:, None] * ab
        hit |= ((pix - nearest) ** 2).sum(axis=1) <= radius * radius
    return hit.reshape(h, w)


def gen_freeform_mask(
    h: int, w: int, target_invalid_ratio: float, seed: int, tol: float = 0.03, max_attempts: int = 50
) -> np.ndarray:
    """Random brush-stroke holes covering ``target_invalid_ratio +- tol`` of a ``1 x h x w`` map.

    Strokes are random-walk polylines (step ``max(1, h/16)``, thickness 2 to
    ``max(2, h/8)``) drawn one at a time until the hole share enters the band.
    An attempt that overshoots is discarded and redrawn from the next seed
    stream; after ``max_attempts`` failures a :class:`MaskError` is raised.
    """
    if not 0.0 <= target_invalid_ratio <= 0.95:
        raise MaskError(f"target hole ratio must lie in [0, 0.95], got {target_invalid_ratio}")
    valid = np.ones((1, h, w))
    if target_invalid_ratio == 0:
        return valid
    step = max(1.0, h / 16)
    max_thick = max(2, h // 8)
    lo, hi = target_invalid_ratio - tol, target_invalid_ratio + tol
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        hole = np.zeros((h, w), dtype=bool)
        while hole.mean() < lo:
            for _ in range(int(rng.integers(1, 7))):
                n_vertex = int(rng.integers(4, 13))
                start = rng.uniform([0, 0], [h, w])
                angles = rng.uniform(0, 2 * np.pi, size=n_vertex)
                lengths = rng.uniform(0.5, 1.5, size=n_vertex) * step
                deltas = np.stack([np.sin(angles), np.cos(angles)], axis=1) * lengths[:, None]
                points = np.vstack([start, start + np.cumsum(deltas, axis=0)])
                points = np.clip(points, [0, 0], [h - 1, w - 1])
                radius = rng.integers(2, max_thick + 1) / 2.0
                hole |= _stroke_pixels(h, w, points, radius)
                if hole.mean() >= lo:
                    break
        if hole.mean() <= hi:
            valid[0][hole] = 0.0
            return valid
    raise MaskError(
        f"could not reach hole ratio {target_invalid_ratio} +- {tol} on {h}x{w} in {max_attempts} attempts"
    )


def gen_stationary_mask(h: int, w: int, rect_fraction: float, seed: int = 0) -> np.ndarray:
    """Centred rectangular hole whose area is ``rect_fraction`` of the frame.

    Side lengths are ``round(h * sqrt(f))`` and ``round(w * sqrt(f))`` (Python
    round-half-even), offset by floor division so odd leftovers go to the
    bottom/right margin. ``seed`` is accepted for interface symmetry; the
    layout is deterministic.
    """
    if not 0.0 < rect_fraction <= 1.0:
        raise MaskError(f"rectangle fraction must lie in (0, 1], got {rect_fraction}")
    scale = np.sqrt(rect_fraction)
    rh, rw = min(h, round(h * scale)), min(w, round(w * scale))
    top, left = (h - rh) // 2, (w - rw) // 2
    m = np.ones((1, h, w))
    m[0, top : top + rh, left : left + rw] = 0.0
    return m


def gen_mask_sequence(kind: str, t: int, h: int, w: int, ratio: float, seed: int) -> np.ndarray:
    """``T x 1 x H x W`` masks; free-form masks are drawn independently per frame."""
    if kind == "freeform":
        return np.stack([gen_freeform_mask(h, w, ratio, seed * 1009 + i) for i in range(t)])
    if kind == "stationary":
        return np.stack([gen_stationary_mask(h, w, ratio, seed)] * t)
    raise MaskError(f"unknown mask kind {kind!r}")
