import json
import math

import numpy as np
import pytest

from metalens.gaussfit import fit_gaussian_fwhm
from metalens.optics import (
    AliasingError,
    MetalensSpec,
    airy_fwhm_px,
    build_psf_grid,
    default_spec,
    load_psf_grid,
    patch_field_angles,
    save_psf_grid,
    simulate_psf,
    toy_spec,
)


@pytest.fixture(scope="module")
def fine_spec():
    # sensor pitch 2x the simulation pitch: resolves the diffraction core
    return MetalensSpec(
        aperture_diameter=0.15e-3,
        focal_length=0.4e-3,
        wavelengths=(570e-9, 540e-9, 555e-9),
        sample_pitch=0.25e-6,
        sensor_width_px=256,
        sensor_height_px=256,
        sensor_pitch=0.5e-6,
        psf_kernel_size=33,
    )


def test_spec_json_round_trip():
    spec = default_spec()
    back = MetalensSpec.from_json(spec.to_json())
    assert back == spec
    keys = set(json.loads(spec.to_json()).keys())
    assert keys == {
        "aperture_diameter",
        "focal_length",
        "wavelengths",
        "sample_pitch",
        "sensor_width_px",
        "sensor_height_px",
        "sensor_pitch",
        "psf_kernel_size",
    }


def test_spec_validation():
    with pytest.raises(ValueError):
        MetalensSpec(0.0, 1e-3, (540e-9,) * 3, 1e-7, 64, 64, 6e-6, 13)
    with pytest.raises(ValueError):
        MetalensSpec(5e-4, 1e-3, (540e-9,) * 3, 1e-7, 64, 64, 6e-6, 12)  # even kernel


def test_wavelength_band_check(toy_lens):
    with pytest.raises(ValueError, match="visible"):
        simulate_psf(toy_lens, (0.0, 0.0), 1200e-9)


def test_field_angle_range_check(toy_lens):
    with pytest.raises(ValueError, match="range"):
        simulate_psf(toy_lens, (math.radians(50), 0.0), toy_lens.design_wavelength)
    # combined diagonal angle can exceed 45 deg even when components do not
    with pytest.raises(ValueError, match="range"):
        simulate_psf(toy_lens, (math.radians(40), math.radians(40)), toy_lens.design_wavelength)


def test_aliasing_guard(toy_lens):
    coarse = MetalensSpec(
        aperture_diameter=toy_lens.aperture_diameter,
        focal_length=toy_lens.focal_length,
        wavelengths=toy_lens.wavelengths,
        sample_pitch=0.4e-6,
        sensor_width_px=64,
        sensor_height_px=64,
        sensor_pitch=6.0e-6,
        psf_kernel_size=13,
    )
    with pytest.raises(AliasingError):
        simulate_psf(coarse, (0.0, 0.0), 540e-9)


def test_on_axis_psf_matches_diffraction_limit(fine_spec):
    psf = simulate_psf(fine_spec, (0.0, 0.0), fine_spec.design_wavelength)
    peak = np.unravel_index(np.argmax(psf), psf.shape)
    center = (fine_spec.psf_kernel_size // 2,) * 2
    assert peak == center
    fit = fit_gaussian_fwhm(psf)
    expected = airy_fwhm_px(fine_spec, fine_spec.design_wavelength)
    assert abs(fit.fwhm - expected) / expected < 0.25


def test_psf_normalization(toy_lens):
    psf = simulate_psf(toy_lens, (0.1, -0.05), toy_lens.design_wavelength)
    assert psf.dtype == np.float32
    assert abs(float(psf.sum()) - 1.0) <= 1e-6
    assert psf.min() >= 0.0


def test_mirror_field_angles_give_mirror_psfs(toy_lens):
    theta = math.atan(25 * toy_lens.sensor_pitch / toy_lens.focal_length)
    k_pos = simulate_psf(toy_lens, (theta, 0.0), toy_lens.design_wavelength)
    k_neg = simulate_psf(toy_lens, (-theta, 0.0), toy_lens.design_wavelength)
    assert np.max(np.abs(k_pos - k_neg[:, ::-1])) < 1e-6
    k_up = simulate_psf(toy_lens, (0.0, theta), toy_lens.design_wavelength)
    k_down = simulate_psf(toy_lens, (0.0, -theta), toy_lens.design_wavelength)
    assert np.max(np.abs(k_up - k_down[::-1, :])) < 1e-6


def test_off_design_wavelength_blurs(toy_lens):
    on = fit_gaussian_fwhm(simulate_psf(toy_lens, (0.0, 0.0), toy_lens.design_wavelength))
    off = fit_gaussian_fwhm(simulate_psf(toy_lens, (0.0, 0.0), 460e-9))
    assert off.fwhm > on.fwhm


def test_grid_n1_is_single_on_axis_psf(toy_lens):
    grid = build_psf_grid(toy_lens, 1)
    assert grid.kernels.shape == (1, 1, 3, toy_lens.psf_kernel_size, toy_lens.psf_kernel_size)
    assert np.allclose(grid.field_angles, 0.0)
    direct = simulate_psf(toy_lens, (0.0, 0.0), toy_lens.wavelengths[0])
    assert np.array_equal(grid.kernels[0, 0, 0], direct)


def test_grid_kernels_normalized(toy_grid3):
    sums = toy_grid3.kernels.sum(axis=(-2, -1))
    assert np.max(np.abs(sums - 1.0)) <= 1e-6


def test_grid_rotation_symmetry(toy_grid3):
    # rotating the field-angle indices by 90 deg rotates each kernel in step
    n = toy_grid3.grid_size
    for i in range(n):
        for j in range(n):
            src = toy_grid3.kernels[i, j, 1]
            dst = toy_grid3.kernels[j, n - 1 - i, 1]
            assert np.max(np.abs(np.rot90(src, 3) - dst)) < 1e-5


def test_grid_corner_wider_than_center(toy_grid3):
    n = toy_grid3.grid_size
    for c in range(toy_grid3.channels):
        center = fit_gaussian_fwhm(toy_grid3.kernels[n // 2, n // 2, c]).fwhm
        corner = fit_gaussian_fwhm(toy_grid3.kernels[0, 0, c]).fwhm
        assert corner > center


def test_patch_field_angles_symmetry():
    spec = toy_spec()
    angles = patch_field_angles(spec, 5)
    assert np.array_equal(angles[:, 0, 0], -angles[:, 4, 0])
    assert np.array_equal(angles[0, :, 1], -angles[4, :, 1])
    assert np.all(angles[2, 2] == 0.0)


def test_grid_save_load_round_trip(tmp_path, toy_grid3):
    path = tmp_path / "grid.mten"
    save_psf_grid(path, toy_grid3)
    assert (tmp_path / "grid.mten.angles.json").exists()
    back = load_psf_grid(path)
    assert np.array_equal(back.kernels, toy_grid3.kernels)
    assert np.allclose(back.field_angles, toy_grid3.field_angles)
