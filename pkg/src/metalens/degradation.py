"""Spatially varying forward model, no-reference quality proxy, degradation maps.

The forward model blurs each image patch with its field-position PSF (feathered
blending, see patches.py) and adds Poisson-Gaussian sensor noise. Degradation
is summarized per patch by S_f (PSF width from Gaussian fitting, pixels) and
S_i (quality proxy in [0, 100], higher = better).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .gaussfit import fit_gaussian_fwhm
from .imaging import as_image_array, conv2d_fft
from .optics import PsfGrid
from .patches import pad_to_multiple, patchwise_filter


class GridMismatchError(ValueError):
    """PsfGrid / DegradationMap / config grid sizes disagree."""


@dataclass(frozen=True)
class NoiseParams:
    """Poisson-Gaussian sensor noise: y = clamp(Poisson(x*g)/g + N(0, sigma^2))."""

    shot_gain: float = 800.0
    read_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.shot_gain < 0 or self.read_sigma < 0:
            raise ValueError("noise parameters must be >= 0")

    def with_seed(self, seed: int) -> "NoiseParams":
        return replace(self, seed=int(seed))


@dataclass
class DegradationMap:
    """Per-patch degradation scores: fwhm_grid is S_f, quality_grid is S_i."""

    fwhm_grid: np.ndarray  # (n, n) float32, pixels, > 0
    quality_grid: np.ndarray  # (n, n) float32 in [0, 100]

    def __post_init__(self):
        self.fwhm_grid = np.asarray(self.fwhm_grid, dtype=np.float32)
        self.quality_grid = np.asarray(self.quality_grid, dtype=np.float32)
        n = self.fwhm_grid.shape[0]
        if self.fwhm_grid.shape != (n, n) or self.quality_grid.shape != (n, n):
            raise GridMismatchError(
                f"score grids must be square and equal-sized, got {self.fwhm_grid.shape} and {self.quality_grid.shape}"
            )
        if not np.all(self.fwhm_grid > 0):
            raise ValueError("fwhm_grid entries must be positive")
        if self.quality_grid.min() < 0 or self.quality_grid.max() > 100:
            raise ValueError("quality_grid entries must lie in [0, 100]")

    @property
    def grid_size(self) -> int:
        return self.fwhm_grid.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.grid_size,
                "s_f": [[round(float(v), 6) for v in row] for row in self.fwhm_grid],
                "s_i": [[round(float(v), 6) for v in row] for row in self.quality_grid],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DegradationMap":
        d = json.loads(text)
        m = cls(fwhm_grid=np.asarray(d["s_f"]), quality_grid=np.asarray(d["s_i"]))
        if m.grid_size != d["n"]:
            raise GridMismatchError(f"declared n={d['n']} but grids are {m.grid_size}x{m.grid_size}")
        return m


def apply_sensor_noise(image: np.ndarray, noise: NoiseParams) -> np.ndarray:
    if noise.shot_gain == 0 and noise.read_sigma == 0:
        return np.clip(image, 0.0, 1.0)
    rng = np.random.default_rng(noise.seed)
    x = np.clip(image.astype(np.float64), 0.0, None)
    if noise.shot_gain > 0:
        x = rng.poisson(x * noise.shot_gain) / noise.shot_gain
    if noise.read_sigma > 0:
        x = x + rng.normal(0.0, noise.read_sigma, x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _grid_kernels_for_channels(psfs: PsfGrid, channels: int) -> np.ndarray:
    if channels == psfs.channels:
        return psfs.kernels
    if channels == 1:
        return psfs.channel_mean_kernels()[:, :, None, :, :]
    raise GridMismatchError(f"PsfGrid has {psfs.channels} channels, image has {channels}")


def apply_forward_model(clean, psfs: PsfGrid, noise: NoiseParams) -> np.ndarray:
    """Patchwise metalens blur followed by seeded Poisson-Gaussian noise."""
    img = as_image_array(clean)
    n = psfs.grid_size
    kernels = _grid_kernels_for_channels(psfs, img.shape[2])
    work, (h, w) = pad_to_multiple(img, n)
    margin = psfs.kernel_size // 2

    def blur(i, j, window):
        out = np.empty_like(window)
        for c in range(window.shape[2]):
            # zero boundary: the margin absorbs it, interior values are exact
            out[:, :, c] = conv2d_fft(window[:, :, c : c + 1], kernels[i, j, c], boundary="zero")[:, :, 0]
        return out

    blurred = patchwise_filter(work, n, blur, margin=margin)[:h, :w]
    return apply_sensor_noise(blurred, noise)


_LAPLACIAN = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])
_LAPLACIAN_NORM = math.sqrt(float((_LAPLACIAN**2).sum()))  # std of response to unit noise

# proxy calibration: gradient energy scale, noise scale, logit weights
_GRAD_SCALE = 0.05
_NOISE_SCALE = 0.02
_W_GRAD = 1.5
_W_NOISE = 2.0


def _patch_quality(patch: np.ndarray) -> float:
    gy, gx = np.gradient(patch)
    grad = float(np.mean(np.hypot(gx, gy)))
    resp = conv2d_fft(patch[:, :, None].astype(np.float32), _LAPLACIAN, boundary="reflect")[:, :, 0]
    mad = float(np.median(np.abs(resp - np.median(resp))))
    noise_sigma = 1.4826 * mad / _LAPLACIAN_NORM
    logit = _W_GRAD * math.log1p(grad / _GRAD_SCALE) - _W_NOISE * (noise_sigma / _NOISE_SCALE)
    return 100.0 / (1.0 + math.exp(-logit))


def score_quality(image, n: int) -> np.ndarray:
    """(n, n) no-reference quality grid in [0, 100]; ordinal, higher = sharper/cleaner."""
    if n < 1:
        raise ValueError("n must be >= 1")
    img = as_image_array(image)
    luma = img.mean(axis=2).astype(np.float64)
    work, _ = pad_to_multiple(luma[:, :, None], n)
    luma = work[:, :, 0]
    ph, pw = luma.shape[0] // n, luma.shape[1] // n
    grid = np.empty((n, n), dtype=np.float32)
    for i in range(n):
        for j in range(n):
            grid[i, j] = _patch_quality(luma[i * ph : (i + 1) * ph, j * pw : (j + 1) * pw])
    return grid


def fwhm_grid_from_psfs(psfs: PsfGrid, per_channel: bool = False) -> np.ndarray:
    """S_f for each patch from Gaussian fits; camera-dependent, image-independent.

    Defaults to the channel-aggregated kernel; per_channel=True returns
    (n, n, C) widths instead.
    """
    n = psfs.grid_size
    if per_channel:
        out = np.empty((n, n, psfs.channels), dtype=np.float32)
    else:
        out = np.empty((n, n), dtype=np.float32)
        mean_kernels = psfs.channel_mean_kernels()
    for i in range(n):
        for j in range(n):
            try:
                if per_channel:
                    for c in range(psfs.channels):
                        out[i, j, c] = fit_gaussian_fwhm(psfs.kernels[i, j, c]).fwhm
                else:
                    out[i, j] = fit_gaussian_fwhm(mean_kernels[i, j]).fwhm
            except RuntimeError as exc:
                raise type(exc)(f"patch ({i}, {j}): {exc}") from exc
    return out


def build_degradation_map(psfs: PsfGrid, image, fwhm_grid: np.ndarray | None = None) -> DegradationMap:
    """Assemble (S_f, S_i) for an image; pass a precomputed fwhm_grid to skip refitting."""
    if fwhm_grid is None:
        fwhm_grid = fwhm_grid_from_psfs(psfs)
    if fwhm_grid.shape != (psfs.grid_size, psfs.grid_size):
        raise GridMismatchError(f"fwhm grid {fwhm_grid.shape} vs PsfGrid n={psfs.grid_size}")
    return DegradationMap(fwhm_grid=fwhm_grid, quality_grid=score_quality(image, psfs.grid_size))
