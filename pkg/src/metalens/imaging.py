"""Float image tensors, FFT-based convolution, edge-preserving smoothing, PNG I/O.

Images are numpy arrays of shape (H, W, C) with C in {1, 3}, float32, values
in [0, 1] for actual images (intermediate tensors may leave the range).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import fft as sp_fft


class DimensionError(ValueError):
    """Shape/size constraint violated (e.g. kernel larger than image)."""


class DecodeError(ValueError):
    """A file could not be decoded; `offset` is the byte position when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


IMAGE_TAGS = ("input", "groundtruth", "restored", "pseudo")


@dataclass
class ImageTensor:
    """An (H, W, C) float32 image with a role tag."""

    data: np.ndarray
    tag: str = "input"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise DimensionError(f"expected (H, W, 1|3) image, got shape {self.data.shape}")
        if self.tag not in IMAGE_TAGS:
            raise ValueError(f"unknown image tag {self.tag!r}, expected one of {IMAGE_TAGS}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def clamped(self) -> "ImageTensor":
        return ImageTensor(np.clip(self.data, 0.0, 1.0), self.tag)


def as_image_array(image) -> np.ndarray:
    """Coerce ImageTensor / 2-D / 3-D array to an (H, W, C) float32 array."""
    if isinstance(image, ImageTensor):
        return image.data
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"expected 2-D or 3-D image array, got shape {arr.shape}")
    return arr


def _pad2d(channel: np.ndarray, pad_h: int, pad_w: int, boundary: str) -> np.ndarray:
    if boundary == "reflect":
        return np.pad(channel, ((pad_h, pad_h), (pad_w, pad_w)), mode="reflect")
    if boundary == "zero":
        return np.pad(channel, ((pad_h, pad_h), (pad_w, pad_w)), mode="constant")
    raise ValueError(f"boundary must be 'reflect' or 'zero', got {boundary!r}")


def conv2d_fft(image, kernel: np.ndarray, boundary: str = "reflect") -> np.ndarray:
    """Linear (non-circular) 2-D convolution of each channel with `kernel`.

    The image is padded by half the kernel size with the chosen boundary rule,
    convolved via zero-padded FFTs (float64 accumulation), and cropped back to
    the input shape. Returns float32.
    """
    img = as_image_array(image)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise DimensionError(f"kernel must be 2-D, got shape {kernel.shape}")
    kh, kw = kernel.shape
    h, w, c = img.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kernel.shape} larger than image {(h, w)}")

    ph, pw = kh // 2, kw // 2
    fh = sp_fft.next_fast_len(h + 2 * ph + kh - 1)
    fw = sp_fft.next_fast_len(w + 2 * pw + kw - 1)
    kf = sp_fft.rfft2(kernel, s=(fh, fw))

    out = np.empty_like(img)
    for ch in range(c):
        padded = _pad2d(img[:, :, ch].astype(np.float64), ph, pw, boundary)
        conv = sp_fft.irfft2(sp_fft.rfft2(padded, s=(fh, fw)) * kf, s=(fh, fw))
        # 'valid'-style crop: the first fully-overlapped sample sits at (kh-1, kw-1)
        # of the full linear convolution; padding by (ph, pw) re-centers it.
        out[:, :, ch] = conv[kh - 1 : kh - 1 + h, kw - 1 : kw - 1 + w].astype(np.float32)
    return out


def _box_mean(channel: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window, windows truncated at the borders."""
    h, w = channel.shape
    r = radius
    ones = np.ones((h, w), dtype=np.float64)
    # integral-image sums for the values and for the window pixel counts
    pad = ((r + 1, r), (r + 1, r))
    acc = np.cumsum(np.cumsum(np.pad(channel, pad, mode="constant"), axis=0), axis=1)
    cnt = np.cumsum(np.cumsum(np.pad(ones, pad, mode="constant"), axis=0), axis=1)
    s = (
        acc[2 * r + 1 : 2 * r + 1 + h, 2 * r + 1 : 2 * r + 1 + w]
        - acc[: h, 2 * r + 1 : 2 * r + 1 + w]
        - acc[2 * r + 1 : 2 * r + 1 + h, : w]
        + acc[:h, :w]
    )
    n = (
        cnt[2 * r + 1 : 2 * r + 1 + h, 2 * r + 1 : 2 * r + 1 + w]
        - cnt[: h, 2 * r + 1 : 2 * r + 1 + w]
        - cnt[2 * r + 1 : 2 * r + 1 + h, : w]
        + cnt[:h, :w]
    )
    return s / n


def guided_lowpass(image, radius: int = 4, eps: float = 1e-3) -> np.ndarray:
    """Edge-preserving low-pass: guided filter with the image as its own guide.

    Smooth regions are averaged while strong edges (local variance >> eps)
    pass through nearly unchanged. Output is clipped to [0, 1].
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    img = as_image_array(image)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        x = img[:, :, ch].astype(np.float64)
        mean = _box_mean(x, radius)
        var = _box_mean(x * x, radius) - mean * mean
        var = np.maximum(var, 0.0)
        a = var / (var + eps)
        b = (1.0 - a) * mean
        q = _box_mean(a, radius) * x + _box_mean(b, radius)
        out[:, :, ch] = q.astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def save_png(path, image, tag: str = "restored") -> None:
    """Write an image as 8-bit PNG (grayscale for C=1, RGB for C=3)."""
    img = as_image_array(image)
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    if q.shape[2] == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_png(path, tag: str = "input") -> ImageTensor:
    """Read an 8-bit PNG into a [0, 1] float image; raises DecodeError on corrupt files."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode not in ("1", "I", "I;16", "LA") else "L")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        try:
            offset = len(open(path, "rb").read())
        except OSError:
            offset = None
        raise DecodeError(f"cannot decode PNG {path}: {exc}", offset=offset) from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(arr, tag)
