"""PSNR and SSIM over frame sequences in ``[0, 1]``."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    return a, b


def psnr(a, b, peak: float = 1.0) -> tuple[np.ndarray, float]:
    """Per-frame and mean ``10 log10(peak^2 / MSE)``; identical frames give ``inf``."""
    a, b = _check_pair(a, b)
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        per_frame = np.where(mse == 0, np.inf, 10.0 * np.log10(peak**2 / np.where(mse == 0, 1.0, mse)))
    return per_frame, float(per_frame.mean())


def to_gray(frames: np.ndarray) -> np.ndarray:
    """``T x 3 x H x W -> T x H x W`` by luminance weights; single-channel input passes through."""
    if frames.shape[1] == 1:
        return frames[:, 0]
    return np.tensordot(LUMA, frames, axes=([0], [1]))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0):
    """Per-frame and mean SSIM on luminance, Gaussian-weighted, valid windows only."""
    a, b = _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape[-2:]) < window:
        raise ValueError(f"frames {x.shape[-2:]} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    per_frame = smap.reshape(len(smap), -1).mean(axis=1)
    return per_frame, float(per_frame.mean())


@dataclass
class MetricReport:
    psnr_per_frame: list
    ssim_per_frame: list
    psnr_mean: float
    ssim_mean: float
    psnr_infinite: bool
    setting: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, pred, target, **setting) -> "MetricReport":
        p, pm = psnr(pred, target)
        s, sm = ssim(pred, target)
        return cls(
            psnr_per_frame=[float(v) if np.isfinite(v) else None for v in p],
            ssim_per_frame=[float(v) for v in s],
            psnr_mean=float(pm) if np.isfinite(pm) else None,
            ssim_mean=sm,
            psnr_infinite=bool(np.isinf(p).any()),
            setting=setting,
        )

    def to_dict(self) -> dict:
        return asdict(self)
