import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from metalens.imaging import (
    DecodeError,
    DimensionError,
    ImageTensor,
    conv2d_fft,
    guided_lowpass,
    load_png,
    save_png,
)
from metalens.tensorfile import load_tensor, save_tensor


def conv2d_loops(img: np.ndarray, kernel: np.ndarray, boundary: str) -> np.ndarray:
    """Brute-force spatial convolution oracle (nested loops, float64)."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w, c = img.shape
    mode = "reflect" if boundary == "reflect" else "constant"
    out = np.zeros_like(img, dtype=np.float64)
    for ch in range(c):
        padded = np.pad(img[:, :, ch].astype(np.float64), ((ph, ph), (pw, pw)), mode=mode)
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        acc += kernel[u, v] * padded[y + kh - 1 - u, x + kw - 1 - v]
                out[y, x, ch] = acc
    return out


def conv2d_direct(img: np.ndarray, kernel: np.ndarray, boundary: str) -> np.ndarray:
    """Spatial convolution oracle: shift-and-add over kernel taps, float64."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w, c = img.shape
    mode = "reflect" if boundary == "reflect" else "constant"
    out = np.zeros_like(img, dtype=np.float64)
    for ch in range(c):
        padded = np.pad(img[:, :, ch].astype(np.float64), ((ph, ph), (pw, pw)), mode=mode)
        for u in range(kh):
            for v in range(kw):
                out[:, :, ch] += kernel[u, v] * padded[kh - 1 - u : kh - 1 - u + h, kw - 1 - v : kw - 1 - v + w]
    return out


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    img = rng.random((16, 12, 3), dtype=np.float32)
    out = conv2d_fft(img, np.array([[1.0]]))
    assert np.allclose(out, img, atol=1e-6)


def test_conv_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((32, 32, 1), dtype=np.float32)
    kernel = rng.random((7, 7))
    kernel /= kernel.sum()
    for boundary in ("reflect", "zero"):
        expected = conv2d_loops(img, kernel, boundary)
        got = conv2d_fft(img, kernel, boundary)
        assert np.max(np.abs(got - expected)) < 1e-6
        # the two oracle forms agree with each other as well
        assert np.max(np.abs(conv2d_direct(img, kernel, boundary) - expected)) < 1e-9


def test_conv_constant_image_with_normalized_psf():
    img = np.full((20, 24, 3), 0.5, dtype=np.float32)
    rng = np.random.default_rng(2)
    kernel = rng.random((5, 5))
    kernel /= kernel.sum()
    out = conv2d_fft(img, kernel, boundary="reflect")
    assert np.allclose(out, 0.5, atol=1e-6)


def test_conv_kernel_larger_than_image():
    img = np.zeros((4, 4, 1), dtype=np.float32)
    with pytest.raises(DimensionError):
        conv2d_fft(img, np.ones((5, 5)) / 25.0)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(8, 64),
    w=st.integers(8, 64),
    k=st.sampled_from([3, 5, 7, 9]),
    boundary=st.sampled_from(["reflect", "zero"]),
    seed=st.integers(0, 2**32 - 1),
)
def test_conv_equals_bruteforce_property(h, w, k, boundary, seed):
    assume(k <= min(h, w))
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 1), dtype=np.float32)
    kernel = rng.standard_normal((k, k))
    expected = conv2d_direct(img, kernel, boundary)
    got = conv2d_fft(img, kernel, boundary)
    assert np.max(np.abs(got - expected)) < 1e-6


def test_guided_constant_fixed_point():
    img = np.full((32, 32, 1), 0.3, dtype=np.float32)
    out = guided_lowpass(img, radius=4, eps=1e-3)
    assert np.allclose(out, 0.3, atol=1e-6)


def _step_texture_image(sigma=0.02, seed=3):
    rng = np.random.default_rng(seed)
    img = np.zeros((64, 64), dtype=np.float32)
    img[:, 32:] = 1.0
    img += rng.normal(0.0, sigma, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)[:, :, None]


def _edge_transition_width(row: np.ndarray) -> int:
    return int(np.count_nonzero((row > 0.1) & (row < 0.9)))


def test_guided_preserves_edge_smooths_texture():
    img = _step_texture_image()
    out = guided_lowpass(img, radius=4, eps=1e-3)
    width_in = _edge_transition_width(img[32, :, 0])
    width_out = _edge_transition_width(out[32, :, 0])
    assert width_out - width_in < 2
    # flat-region variance must drop by > 50% (measure away from the edge)
    flat_in = img[:, 4:24, 0]
    flat_out = out[:, 4:24, 0]
    assert np.var(flat_out) < 0.5 * np.var(flat_in)


def test_guided_reduces_noise_variance():
    rng = np.random.default_rng(4)
    img = (0.5 + rng.normal(0.0, 0.1, (48, 48, 1))).astype(np.float32)
    out = guided_lowpass(img, radius=4, eps=1e-3)
    assert np.var(out) < np.var(img)


def test_guided_idempotent_on_piecewise_constant():
    img = np.zeros((80, 80, 1), dtype=np.float32)
    img[:, 40:] = 1.0
    img[20:60, 10:30] = 1.0
    once = guided_lowpass(img, radius=4, eps=1e-3)
    twice = guided_lowpass(once, radius=4, eps=1e-3)
    # residual concentrates on edge pixels; flat interior is an exact fixed point
    assert np.mean(np.abs(twice - once)) < 1e-3
    assert np.max(np.abs(twice - once)) < 1e-2
    assert np.allclose(twice[2:16, 70:78], once[2:16, 70:78], atol=1e-5)


def test_image_tensor_invariants():
    t = ImageTensor(np.zeros((4, 5, 3)), tag="groundtruth")
    assert (t.height, t.width, t.channels) == (4, 5, 3)
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((4, 5, 3)), tag="bogus")
    with pytest.raises(DimensionError):
        ImageTensor(np.zeros((4, 5, 2)))
    clamped = ImageTensor(np.full((2, 2, 1), 1.7)).clamped()
    assert clamped.data.max() <= 1.0


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.random((21, 17, 3), dtype=np.float32)
    path = tmp_path / "img.png"
    save_png(path, img)
    back = load_png(path)
    assert back.data.shape == img.shape
    assert np.max(np.abs(back.data - img)) <= 1.0 / 255.0 + 1e-6


def test_png_gray_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.random((9, 11, 1), dtype=np.float32)
    path = tmp_path / "g.png"
    save_png(path, img)
    back = load_png(path)
    assert back.data.shape == img.shape
    assert np.max(np.abs(back.data - img)) <= 1.0 / 255.0 + 1e-6


def test_png_quantized_exact_round_trip(tmp_path):
    img = (np.arange(256, dtype=np.float32).reshape(16, 16, 1) / 255.0)
    path = tmp_path / "q.png"
    save_png(path, img)
    back = load_png(path)
    assert np.array_equal(back.data, img)


def test_png_truncated_raises(tmp_path):
    rng = np.random.default_rng(7)
    path = tmp_path / "t.png"
    save_png(path, rng.random((32, 32, 3), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DecodeError):
        load_png(path)


def test_tensorfile_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    arr = rng.standard_normal((3, 7, 7)).astype(np.float32)
    path = tmp_path / "t.mten"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


@settings(max_examples=20, deadline=None)
@given(shape=st.lists(st.integers(1, 6), min_size=1, max_size=4), seed=st.integers(0, 2**16))
def test_tensorfile_round_trip_property(tmp_path_factory, shape, seed):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape).astype(np.float32)
    path = tmp_path_factory.mktemp("mten") / "x.mten"
    save_tensor(path, arr)
    assert np.array_equal(load_tensor(path), arr)


def test_tensorfile_truncated(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.mten"
    save_tensor(path, arr)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DecodeError) as err:
        load_tensor(path)
    assert err.value.offset is not None


def test_tensorfile_bad_magic(tmp_path):
    path = tmp_path / "b.mten"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DecodeError) as err:
        load_tensor(path)
    assert err.value.offset == 0
