"""Deterministic synthetic paired dataset: procedural clean images + forward model.

Each image mixes a background gradient, filled polygons, stroke clusters, and
multi-octave smooth texture, so both strong structure (for fidelity checks)
and fine detail (for the edge-preserving target filter to remove) are present.
Everything derives from the base seed; per-image generators are spawned as
default_rng([seed, index]).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .degradation import NoiseParams, apply_forward_model
from .imaging import save_png
from .optics import PsfGrid

CORPUS_NOISE = NoiseParams(shot_gain=100.0, read_sigma=0.03)


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells))
    return ndimage.zoom(coarse, size / cells, order=3, mode="reflect", grid_mode=True)


def _texture(rng, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    amp = 1.0
    # finest octave stays >= 4 px so texture reads as structure, not noise
    for cells in (4, 8, 16, 32):
        if cells > size // 4:
            break
        out += amp * _smooth_noise(rng, size, cells)
        amp *= 0.55
    out -= out.min()
    return out / max(out.max(), 1e-9)


def _background(rng, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    kind = rng.integers(0, 3)
    if kind == 0:
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * x + np.sin(angle) * y
    elif kind == 1:
        cx, cy = rng.uniform(0.2, 0.8, 2)
        ramp = np.hypot(x - cx, y - cy)
    else:
        ramp = np.full((size, size), 0.5)
    ramp -= ramp.min()
    ramp /= max(ramp.max(), 1e-9)
    lo, hi = sorted(rng.uniform(0.15, 0.85, 2))
    return lo + (hi - lo) * ramp


def _draw_shapes(rng, size: int):
    canvas = Image.new("F", (size, size), 0.0)
    draw = ImageDraw.Draw(canvas)
    mask = Image.new("F", (size, size), 0.0)
    mask_draw = ImageDraw.Draw(mask)
    for _ in range(int(rng.integers(3, 8))):
        cx, cy = rng.uniform(0, size, 2)
        radius = rng.uniform(0.08, 0.3) * size
        sides = int(rng.integers(3, 8))
        phase = rng.uniform(0, 2 * np.pi)
        pts = [
            (
                cx + radius * np.cos(phase + 2 * np.pi * k / sides),
                cy + radius * np.sin(phase + 2 * np.pi * k / sides),
            )
            for k in range(sides)
        ]
        level = float(rng.uniform(0.05, 0.95))
        draw.polygon(pts, fill=level)
        mask_draw.polygon(pts, fill=1.0)
    return np.asarray(canvas, dtype=np.float64), np.asarray(mask, dtype=np.float64)


def _draw_strokes(rng, size: int):
    canvas = Image.new("F", (size, size), 0.0)
    draw = ImageDraw.Draw(canvas)
    mask = Image.new("F", (size, size), 0.0)
    mask_draw = ImageDraw.Draw(mask)
    for _ in range(int(rng.integers(4, 12))):
        x0, y0 = rng.uniform(0, size, 2)
        length = rng.uniform(0.05, 0.25) * size
        angle = rng.uniform(0, 2 * np.pi)
        x1, y1 = x0 + length * np.cos(angle), y0 + length * np.sin(angle)
        width = max(1, int(rng.integers(1, max(2, size // 24))))
        level = float(rng.uniform(0.0, 1.0))
        draw.line([(x0, y0), (x1, y1)], fill=level, width=width)
        mask_draw.line([(x0, y0), (x1, y1)], fill=1.0, width=width)
    return np.asarray(canvas, dtype=np.float64), np.asarray(mask, dtype=np.float64)


def generate_clean_image(size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """One procedural clean image in [0, 1], (size, size, channels) float32."""
    base = _background(rng, size)
    shapes, shape_mask = _draw_shapes(rng, size)
    strokes, stroke_mask = _draw_strokes(rng, size)
    mono = base * (1 - shape_mask) + shapes * shape_mask
    mono = mono * (1 - stroke_mask) + strokes * stroke_mask
    texture = _texture(rng, size)
    tex_amp = rng.uniform(0.08, 0.2)
    mono = mono + tex_amp * (texture - 0.5)
    if channels == 1:
        img = mono[:, :, None]
    else:
        tints = rng.uniform(0.75, 1.25, channels)
        offsets = rng.uniform(-0.06, 0.06, channels)
        img = np.stack([mono * t + o for t, o in zip(tints, offsets)], axis=2)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def noise_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0xD06]).generate_state(1)[0])


def synthesize_corpus(
    count: int,
    size: int,
    seed: int,
    psfs: PsfGrid,
    out_dir,
    noise: NoiseParams = CORPUS_NOISE,
    channels: int = 3,
) -> dict:
    """Write `count` (clean, degraded) pairs plus manifest.json; returns the manifest."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        clean = generate_clean_image(size, image_rng(seed, i), channels=channels)
        degraded = apply_forward_model(clean, psfs, noise.with_seed(noise_seed(seed, i)))
        save_png(out / "clean" / f"{i:06d}.png", clean)
        save_png(out / "degraded" / f"{i:06d}.png", degraded)
    manifest = {
        "count": count,
        "size": size,
        "seed": seed,
        "channels": channels,
        "n": psfs.grid_size,
        "psf_kernel_size": psfs.kernel_size,
        "noise": {"shot_gain": noise.shot_gain, "read_sigma": noise.read_sigma},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
