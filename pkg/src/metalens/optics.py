"""Metalens PSF simulation over the field of view.

The lens is modeled as a hyperbolic phase profile at its design wavelength
(green channel). A tilted plane wave is propagated from the lens plane to the
focal plane with the angular-spectrum method; the focal-plane intensity is
recentered on its centroid, integrated onto sensor pixels, and normalized.
Off-design wavelengths defocus (the imparted phase is wavelength-independent),
off-axis angles pick up coma/astigmatism: both grow the PSF width.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

from .tensorfile import load_tensor, save_tensor

VISIBLE_BAND = (380e-9, 780e-9)
MAX_FIELD_ANGLE = math.radians(45.0)


class AliasingError(ValueError):
    """Simulation grid too coarse for the requested wavelength."""


@dataclass(frozen=True)
class MetalensSpec:
    """Physical camera description, SI units throughout."""

    aperture_diameter: float
    focal_length: float
    wavelengths: tuple  # (red, green, blue) or any channel order; index 1 is the design wavelength
    sample_pitch: float
    sensor_width_px: int
    sensor_height_px: int
    sensor_pitch: float
    psf_kernel_size: int

    def __post_init__(self):
        object.__setattr__(self, "wavelengths", tuple(float(w) for w in self.wavelengths))
        for name in ("aperture_diameter", "focal_length", "sample_pitch", "sensor_pitch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(w <= 0 for w in self.wavelengths):
            raise ValueError("wavelengths must be positive")
        if self.psf_kernel_size % 2 != 1:
            raise ValueError("psf_kernel_size must be odd")
        if self.sensor_width_px <= 0 or self.sensor_height_px <= 0:
            raise ValueError("sensor dimensions must be positive")

    @property
    def design_wavelength(self) -> float:
        return self.wavelengths[1]

    @property
    def channels(self) -> int:
        return len(self.wavelengths)

    def to_json(self) -> str:
        d = asdict(self)
        d["wavelengths"] = list(self.wavelengths)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetalensSpec":
        return cls(**json.loads(text))


def default_spec() -> MetalensSpec:
    """1 mm-scale camera: 400x400 px sensor at 1.75 um pitch, f/2 metalens.

    The channel wavelengths form a narrow probe band at/above the design
    wavelength so that every channel focuses at or in front of the sensor.
    Off-axis field curvature then strictly adds defocus for every channel and
    PSF width grows monotonically toward the sensor corners. A full RGB spread
    (e.g. 460/540/620 nm) inverts that ordering on this hyperbolic profile:
    the huge on-axis chromatic defocus is partially cancelled off-axis.
    """
    return MetalensSpec(
        aperture_diameter=0.5e-3,
        focal_length=1.0e-3,
        wavelengths=(544e-9, 540e-9, 542e-9),
        sample_pitch=1.75e-6 / 8,
        sensor_width_px=400,
        sensor_height_px=400,
        sensor_pitch=1.75e-6,
        psf_kernel_size=21,
    )


def toy_spec(kernel_size: int = 13) -> MetalensSpec:
    """Small camera for fast tests and the 64x64 toy pipeline.

    Wavelengths sit close to the design wavelength so the chromatic blur stays
    within a small kernel; off-axis aberrations still dominate at the corners.
    """
    return MetalensSpec(
        aperture_diameter=0.15e-3,
        focal_length=0.4e-3,
        wavelengths=(570e-9, 540e-9, 555e-9),
        sample_pitch=6e-6 / 27,
        sensor_width_px=64,
        sensor_height_px=64,
        sensor_pitch=6e-6,
        psf_kernel_size=kernel_size,
    )


@dataclass
class PsfGrid:
    """n x n grid of per-channel PSF kernels with their field angles (radians)."""

    kernels: np.ndarray  # (n, n, channels, k, k) float32, each kernel sums to 1
    field_angles: np.ndarray  # (n, n, 2) float64: (theta_x, theta_y)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float32)
        self.field_angles = np.asarray(self.field_angles, dtype=np.float64)
        if self.kernels.ndim != 5 or self.kernels.shape[0] != self.kernels.shape[1]:
            raise ValueError(f"kernels must be (n, n, C, k, k), got {self.kernels.shape}")
        if self.field_angles.shape != (*self.kernels.shape[:2], 2):
            raise ValueError("field_angles shape mismatch")

    @property
    def grid_size(self) -> int:
        return self.kernels.shape[0]

    @property
    def channels(self) -> int:
        return self.kernels.shape[2]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[3]

    def channel_mean_kernels(self) -> np.ndarray:
        """(n, n, k, k) kernels averaged over channels and renormalized."""
        mean = self.kernels.mean(axis=2).astype(np.float64)
        sums = mean.sum(axis=(-2, -1), keepdims=True)
        return (mean / sums).astype(np.float32)


def _validate_request(spec: MetalensSpec, field_angle, wavelength: float):
    tx, ty = float(field_angle[0]), float(field_angle[1])
    if not (VISIBLE_BAND[0] <= wavelength <= VISIBLE_BAND[1]):
        raise ValueError(f"wavelength {wavelength * 1e9:.0f} nm outside the visible band")
    total = math.atan(math.hypot(math.tan(tx), math.tan(ty)))
    if max(abs(tx), abs(ty), abs(total)) >= MAX_FIELD_ANGLE:
        raise ValueError(f"field angle ({tx:.3f}, {ty:.3f}) rad out of range (|angle| < 45 deg)")
    if spec.sample_pitch > wavelength / 2:
        raise AliasingError(
            f"sample_pitch {spec.sample_pitch * 1e9:.1f} nm exceeds lambda/2 = {wavelength / 2 * 1e9:.1f} nm"
        )
    return tx, ty


def _focal_intensity(
    spec: MetalensSpec, tan_x: float, tan_y: float, wavelength: float, half_extent: float, parity: int
):
    """Angular-spectrum propagation lens -> focal plane.

    Returns the focal-plane intensity on the simulation grid, recentered on the
    paraxial image point (f*tan(theta)) of the tilted illumination. The grid
    size keeps the same parity as the pixel-binning factor so that symmetric
    spots can be cropped exactly symmetrically.
    """
    p = spec.sample_pitch
    n_grid = sp_fft.next_fast_len(int(math.ceil(2 * half_extent / p)))
    while n_grid % 2 != parity % 2:
        n_grid = sp_fft.next_fast_len(n_grid + 1)
    coords = (np.arange(n_grid) - (n_grid - 1) / 2.0) * p
    xx = coords[None, :]
    yy = coords[:, None]
    rho2 = xx * xx + yy * yy

    f = spec.focal_length
    lam_d = spec.design_wavelength
    aperture = rho2 <= (spec.aperture_diameter / 2.0) ** 2
    lens_phase = -(2.0 * math.pi / lam_d) * (np.sqrt(rho2 + f * f) - f)
    sin_x = tan_x / math.sqrt(1.0 + tan_x * tan_x + tan_y * tan_y)
    sin_y = tan_y / math.sqrt(1.0 + tan_x * tan_x + tan_y * tan_y)
    tilt_phase = (2.0 * math.pi / wavelength) * (sin_x * xx + sin_y * yy)
    field = np.where(aperture, np.exp(1j * (lens_phase + tilt_phase)), 0.0).astype(np.complex128)

    fx = sp_fft.fftfreq(n_grid, d=p)
    fx2 = fx * fx
    arg = 1.0 / wavelength**2 - fx2[None, :] - fx2[:, None]
    propagating = arg > 0
    kz = np.where(propagating, 2.0 * math.pi * f * np.sqrt(np.maximum(arg, 0.0)), 0.0)
    # translate the output window onto the paraxial image point
    shift = 2.0 * math.pi * (fx[None, :] * (f * tan_x) + fx[:, None] * (f * tan_y))
    transfer = np.where(propagating, np.exp(1j * (kz + shift)), 0.0)

    spectrum = sp_fft.fft2(field, workers=-1)
    focal = sp_fft.ifft2(spectrum * transfer, workers=-1)
    return np.abs(focal) ** 2


def _bin_to_kernel(intensity: np.ndarray, m: int, ksize: int) -> np.ndarray:
    """Crop around the intensity centroid and integrate m x m blocks into pixels."""
    span = ksize * m
    n_grid = intensity.shape[0]
    c0 = (n_grid - 1) / 2.0

    # centroid from a generous window around the recentered spot
    w = min(n_grid, 3 * span)
    lo = int(round(c0 - w / 2.0))
    lo = max(0, min(lo, n_grid - w))
    win = intensity[lo : lo + w, lo : lo + w]
    total = win.sum()
    idx = np.arange(w)
    cy = lo + float((win.sum(axis=1) * idx).sum() / total)
    cx = lo + float((win.sum(axis=0) * idx).sum() / total)

    # align the centroid with the center of the central sensor pixel
    j0 = (ksize - 1) // 2
    start_y = int(round(cy - j0 * m - (m - 1) / 2.0))
    start_x = int(round(cx - j0 * m - (m - 1) / 2.0))
    pad_before_y = max(0, -start_y)
    pad_before_x = max(0, -start_x)
    pad_after_y = max(0, start_y + span - n_grid)
    pad_after_x = max(0, start_x + span - n_grid)
    if pad_before_y or pad_before_x or pad_after_y or pad_after_x:
        intensity = np.pad(intensity, ((pad_before_y, pad_after_y), (pad_before_x, pad_after_x)))
        start_y += pad_before_y
        start_x += pad_before_x
    crop = intensity[start_y : start_y + span, start_x : start_x + span]
    return crop.reshape(ksize, m, ksize, m).sum(axis=(1, 3))


def simulate_psf(spec: MetalensSpec, field_angle, wavelength: float) -> np.ndarray:
    """Simulate one PSF kernel at sensor pitch; (k, k) float32 summing to 1."""
    tx, ty = _validate_request(spec, field_angle, wavelength)
    ratio = spec.sensor_pitch / spec.sample_pitch
    m = int(round(ratio))
    if abs(ratio - m) > 1e-9 or m < 1:
        raise ValueError(
            f"sensor_pitch must be an integer multiple of sample_pitch (ratio {ratio:.4f})"
        )
    ksize = spec.psf_kernel_size
    margin = max(1.5 * ksize * spec.sensor_pitch, 30e-6)
    half_extent = spec.aperture_diameter / 2.0 + margin
    intensity = _focal_intensity(spec, math.tan(tx), math.tan(ty), wavelength, half_extent, parity=m)
    kernel = _bin_to_kernel(intensity, m, ksize)
    total = kernel.sum()
    if total <= 0:
        raise RuntimeError("simulated PSF has no energy in the kernel window")
    kernel = (kernel / total).astype(np.float32)
    return (kernel / kernel.sum()).astype(np.float32)


def patch_field_angles(spec: MetalensSpec, n: int) -> np.ndarray:
    """(n, n, 2) field angles of the patch centers; exactly sign-symmetric."""
    angles = np.zeros((n, n, 2), dtype=np.float64)
    width_m = spec.sensor_width_px * spec.sensor_pitch
    height_m = spec.sensor_height_px * spec.sensor_pitch
    for i in range(n):  # rows: y
        for j in range(n):  # cols: x
            # (2k+1-n)/(2n) spans the sensor symmetrically; integer numerator
            # keeps mirrored patches bitwise sign-symmetric
            cx = (2 * j + 1 - n) * width_m / (2 * n)
            cy = (2 * i + 1 - n) * height_m / (2 * n)
            angles[i, j, 0] = math.atan(cx / spec.focal_length)
            angles[i, j, 1] = math.atan(cy / spec.focal_length)
    return angles


def build_psf_grid(spec: MetalensSpec, n: int) -> PsfGrid:
    """Simulate one PSF per patch center per channel.

    The hyperbolic profile is radially symmetric, so kernels for mirrored or
    axis-swapped field angles are exact flips/transposes of each other; only
    one representative per dihedral orbit is simulated.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    angles = patch_field_angles(spec, n)
    k = spec.psf_kernel_size
    kernels = np.zeros((n, n, spec.channels, k, k), dtype=np.float32)
    cache: dict = {}
    for i in range(n):
        for j in range(n):
            tx, ty = angles[i, j]
            ax, ay = abs(tx), abs(ty)
            swapped = ay > ax
            canon = (ay, ax) if swapped else (ax, ay)
            for c, lam in enumerate(spec.wavelengths):
                key = (canon, lam)
                if key not in cache:
                    cache[key] = simulate_psf(spec, canon, lam)
                kern = cache[key]
                if swapped:
                    kern = kern.T
                if tx < 0:
                    kern = kern[:, ::-1]
                if ty < 0:
                    kern = kern[::-1, :]
                kernels[i, j, c] = kern
    return PsfGrid(kernels=kernels, field_angles=angles)


def save_psf_grid(path, grid: PsfGrid) -> None:
    """TensorFile [n, n, C, k, k] plus a JSON sidecar with the field angles."""
    save_tensor(path, grid.kernels)
    sidecar = Path(f"{path}.angles.json")
    sidecar.write_text(json.dumps({"field_angles": grid.field_angles.tolist()}, indent=2))


def load_psf_grid(path) -> PsfGrid:
    kernels = load_tensor(path)
    sidecar = Path(f"{path}.angles.json")
    angles = np.asarray(json.loads(sidecar.read_text())["field_angles"], dtype=np.float64)
    return PsfGrid(kernels=kernels, field_angles=angles)


def airy_fwhm_px(spec: MetalensSpec, wavelength: float) -> float:
    """Diffraction-limit width 1.22*lambda*f/D expressed in sensor pixels."""
    return 1.22 * wavelength * spec.focal_length / spec.aperture_diameter / spec.sensor_pitch
