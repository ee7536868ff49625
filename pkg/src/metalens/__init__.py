"""Metalens camera simulation, degradation scoring, and tunable multipath restoration."""

from .degradation import DegradationMap, NoiseParams, apply_forward_model, build_degradation_map, score_quality
from .gaussfit import GaussianFit, fit_gaussian_fwhm
from .imaging import ImageTensor, conv2d_fft, guided_lowpass, load_png, save_png
from .metrics import psnr, ssim
from .model import (
    LatentCode,
    ModelConfig,
    MultipathModel,
    forward_path,
    generate_pseudo_pairs,
    load_model,
    restore,
    save_model,
    train,
    tunable_decode,
)
from .optics import MetalensSpec, PsfGrid, build_psf_grid, default_spec, simulate_psf, toy_spec
from .tensorfile import load_tensor, save_tensor
from .wiener import wiener_deconvolve, wiener_patchwise

__version__ = "0.1.0"
