"""Patch decomposition with linear feathering for spatially varying filtering.

The image is split into an n x n grid; adjacent patches cross-fade linearly
over an overlap zone of 25% of the patch size. The 1-D weight profiles are a
partition of unity by construction, so the 2-D products are as well.
"""

from __future__ import annotations

import numpy as np

OVERLAP_FRACTION = 0.25


def feather_profiles(length: int, n: int, overlap_frac: float = OVERLAP_FRACTION) -> np.ndarray:
    """(n, length) float64 weights; each column sums to exactly 1."""
    if length % n != 0:
        raise ValueError(f"length {length} not divisible into {n} patches")
    patch = length / n
    o = overlap_frac * patch
    y = np.arange(length, dtype=np.float64) + 0.5
    ramps = []
    for b in range(1, n):
        ramps.append(np.clip((y - (b * patch - o / 2.0)) / o, 0.0, 1.0))
    profiles = np.empty((n, length), dtype=np.float64)
    for i in range(n):
        left = ramps[i - 1] if i > 0 else 1.0
        right = (1.0 - ramps[i]) if i < n - 1 else 1.0
        profiles[i] = left * right
    return profiles


def profile_support(profile: np.ndarray) -> tuple[int, int]:
    """Half-open index range where a 1-D weight profile is nonzero."""
    nz = np.nonzero(profile > 0.0)[0]
    return int(nz[0]), int(nz[-1]) + 1


def pad_to_multiple(image: np.ndarray, n: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad (H, W, C) so both spatial dims divide into n patches."""
    h, w = image.shape[:2]
    ph = (-h) % n
    pw = (-w) % n
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return image, (h, w)


def patchwise_filter(image: np.ndarray, n: int, fn, margin: int = 0) -> np.ndarray:
    """Blend per-patch filtered windows with feathered weights.

    `fn(i, j, window)` filters an (h, w, C) window covering the support of
    patch (i, j) plus `margin` pixels of context on each side (sampled from a
    reflect-padded image) and must return an array of the same shape. The
    margin region is discarded after filtering, so boundary effects of `fn`
    never reach the blended output.
    """
    h, w, c = image.shape
    wy = feather_profiles(h, n)
    wx = feather_profiles(w, n)
    padded = np.pad(image, ((margin, margin), (margin, margin), (0, 0)), mode="reflect") if margin else image
    out = np.zeros((h, w, c), dtype=np.float64)
    for i in range(n):
        y0, y1 = profile_support(wy[i])
        for j in range(n):
            x0, x1 = profile_support(wx[j])
            window = padded[y0 : y1 + 2 * margin, x0 : x1 + 2 * margin]
            filtered = np.asarray(fn(i, j, window), dtype=np.float64)
            if filtered.shape != window.shape:
                raise ValueError(f"patch fn returned {filtered.shape}, expected {window.shape}")
            core = filtered[margin : margin + (y1 - y0), margin : margin + (x1 - x0)]
            weight = wy[i, y0:y1, None] * wx[j, None, x0:x1]
            out[y0:y1, x0:x1] += weight[:, :, None] * core
    return out.astype(np.float32)
