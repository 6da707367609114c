"""PSNR and SSIM for [-1, 1] clips, evaluated on the [0, 1] range."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .clips import VideoClip
from .errors import DimensionError

PSNR_CAP = 100.0
SSIM_WINDOW = 8
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _unit_range(a) -> np.ndarray:
    a = a.frames if isinstance(a, VideoClip) else a
    return (np.asarray(a, dtype=np.float64) + 1.0) / 2.0


def psnr(reference, candidate) -> float:
    a, b = _unit_range(reference), _unit_range(candidate)
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return PSNR_CAP if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)


def ssim_image(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all 8x8 sliding windows of two (H, W) images in [0, 1]."""
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa ** 2).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def ssim(reference, candidate) -> float:
    """Per-frame SSIM (channels averaged within a frame), averaged over frames."""
    a, b = _unit_range(reference), _unit_range(candidate)
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 4 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs (T, C, H, W) with H, W >= {SSIM_WINDOW}, got {a.shape}")
    per_frame = [np.mean([ssim_image(a[t, c], b[t, c]) for c in range(a.shape[1])])
                 for t in range(a.shape[0])]
    return float(np.mean(per_frame))


def eval_metrics(reference, candidate) -> dict[str, float]:
    return {"psnr": psnr(reference, candidate), "ssim": ssim(reference, candidate)}
