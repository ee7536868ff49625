"""Reference image metrics: PSNR and SSIM on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np

from .imaging import DimensionError, as_image_array, conv2d_fft

PSNR_CAP_DB = 99.0


def psnr(a, b) -> float:
    """10*log10(1/MSE); identical images report the 99 dB cap."""
    x = as_image_array(a).astype(np.float64)
    y = as_image_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM, averaged over channels; result in [-1, 1]."""
    x = as_image_array(a).astype(np.float64)
    y = as_image_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise DimensionError(f"image {x.shape[:2]} smaller than SSIM window {window}")
    win = _gaussian_window(window, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    scores = []
    for c in range(x.shape[2]):
        xc = x[:, :, c]
        yc = y[:, :, c]
        mu_x = conv2d_fft(xc, win).astype(np.float64)[:, :, 0]
        mu_y = conv2d_fft(yc, win).astype(np.float64)[:, :, 0]
        xx = conv2d_fft(xc * xc, win).astype(np.float64)[:, :, 0] - mu_x * mu_x
        yy = conv2d_fft(yc * yc, win).astype(np.float64)[:, :, 0] - mu_y * mu_y
        xy = conv2d_fft(xc * yc, win).astype(np.float64)[:, :, 0] - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
