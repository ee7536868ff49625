"""Wiener deconvolution baseline, global and patchwise."""

from __future__ import annotations

import numpy as np
from scipy import fft as sp_fft

from .imaging import as_image_array
from .optics import PsfGrid
from .patches import pad_to_multiple, patchwise_filter


class SingularKernelError(ValueError):
    """Kernel carries no energy; the inverse filter is undefined."""


def _wiener_channel(channel: np.ndarray, kernel: np.ndarray, nsr: float) -> np.ndarray:
    """Circular Wiener filter on the whole-sample symmetric (mirrored) extension.

    The mirrored frame wraps smoothly, and for symmetric kernels its circular
    blur coincides exactly with reflect-boundary convolution, so the round
    trip against conv2d_fft(..., "reflect") is model-consistent.
    """
    h, w = channel.shape
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    x = channel.astype(np.float64)
    ext = np.concatenate([x, x[:, ::-1][:, 1:-1]], axis=1) if w > 2 else x
    ext = np.concatenate([ext, ext[::-1, :][1:-1, :]], axis=0) if h > 2 else ext
    he, we = ext.shape
    if kh > he or kw > we:
        raise ValueError(f"kernel {kernel.shape} larger than mirrored frame {(he, we)}")
    emb = np.zeros((he, we))
    emb[:kh, :kw] = kernel
    emb = np.roll(emb, (-ph, -pw), axis=(0, 1))  # kernel center at the circular origin
    otf = sp_fft.rfft2(emb)
    spectrum = sp_fft.rfft2(ext)
    denom = np.abs(otf) ** 2 + nsr
    gain = np.divide(np.conj(otf), denom, out=np.zeros_like(otf), where=denom > 0)
    restored = sp_fft.irfft2(spectrum * gain, s=(he, we))
    return restored[:h, :w]


def wiener_deconvolve(degraded, kernel: np.ndarray, nsr: float, clamp: bool = True) -> np.ndarray:
    """Frequency-domain inverse filter conj(H)/(|H|^2 + nsr), per channel.

    `nsr` is a scalar noise-to-signal power ratio; clamp=False returns the raw
    linear estimate (used by the linearity property test).
    """
    if nsr < 0:
        raise ValueError("nsr must be >= 0")
    img = as_image_array(degraded)
    kernel = np.asarray(kernel, dtype=np.float64)
    energy = float((kernel**2).sum())
    if energy == 0.0:
        raise SingularKernelError("all-zero kernel")
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = _wiener_channel(img[:, :, c], kernel, nsr).astype(np.float32)
    return np.clip(out, 0.0, 1.0) if clamp else out


def wiener_patchwise(degraded, psfs: PsfGrid, nsr: float) -> np.ndarray:
    """Per-patch Wiener deconvolution with the forward model's feathered blending."""
    img = as_image_array(degraded)
    n = psfs.grid_size
    if img.shape[2] != psfs.channels and img.shape[2] != 1:
        raise ValueError(f"image channels {img.shape[2]} vs PsfGrid channels {psfs.channels}")
    kernels = psfs.kernels if img.shape[2] == psfs.channels else psfs.channel_mean_kernels()[:, :, None]
    if n == 1:
        out = np.empty_like(img)
        for c in range(img.shape[2]):
            out[:, :, c] = _wiener_channel(img[:, :, c], kernels[0, 0, c], nsr).astype(np.float32)
        return np.clip(out, 0.0, 1.0)
    work, (h, w) = pad_to_multiple(img, n)

    def deconv(i, j, window):
        out = np.empty_like(window)
        for c in range(window.shape[2]):
            out[:, :, c] = _wiener_channel(window[:, :, c], kernels[i, j, c], nsr).astype(np.float32)
        return out

    restored = patchwise_filter(work, n, deconv, margin=psfs.kernel_size)[:h, :w]
    return np.clip(restored, 0.0, 1.0)
