import numpy as np
import pytest

from metalens import autodiff as ad
from metalens.autodiff import Adam, Tensor, adam_step, numerical_gradient
from metalens.degradation import DegradationMap
from metalens.nn import (
    Conv2d,
    ConvTranspose2d,
    FiLM,
    GroupNorm,
    Linear,
    LoraConv2d,
    SvdaAttention,
    l2_loss,
    lora_forward,
    perceptual_proxy_loss,
    standardize_map,
    svda_q,
)

RTOL = 1e-4


def check_gradient(build_loss, x0: np.ndarray, rtol=RTOL):
    """Compare reverse-mode gradient of build_loss (Tensor->Tensor scalar) with
    central finite differences at x0 (float64)."""
    x0 = x0.astype(np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(t)
    loss.backward()
    analytic = t.grad

    def scalar(x):
        return float(build_loss(Tensor(x.copy())).data)

    numeric = numerical_gradient(scalar, x0)
    denom = np.maximum(np.abs(numeric), 1e-6)
    rel = np.max(np.abs(analytic - numeric) / denom)
    assert rel < rtol, f"gradient mismatch rel={rel:.3e}"


def test_add_mul_broadcast_gradients():
    rng = np.random.default_rng(0)
    other = rng.standard_normal((1, 4)).astype(np.float64)
    check_gradient(lambda t: ad.mean((t + Tensor(other)) * t * 1.7), rng.standard_normal((3, 4)))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((4, 5)))
    check_gradient(lambda t: ad.mean(ad.matmul(t, w)), rng.standard_normal((3, 4)))


def test_silu_sigmoid_sqrt_abs_gradients():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 6)) + 0.1
    check_gradient(lambda t: ad.mean(ad.silu(t)), x)
    check_gradient(lambda t: ad.mean(ad.sigmoid(t)), x)
    check_gradient(lambda t: ad.mean(ad.sqrt(t * t + 1.0)), x)
    check_gradient(lambda t: ad.mean(ad.abs_(t)), x + np.sign(x) * 0.2)


def test_conv2d_gradient_input_weight_bias():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((1, 4, 8, 8))
    w0 = rng.standard_normal((3, 4, 3, 3)) * 0.5
    b0 = rng.standard_normal(3) * 0.1
    probe = Tensor(rng.standard_normal((1, 3, 8, 8)))

    check_gradient(lambda t: ad.mean(ad.conv2d(t, Tensor(w0), Tensor(b0), pad=1) * probe), x0)
    check_gradient(lambda t: ad.mean(ad.conv2d(Tensor(x0), t, Tensor(b0), pad=1) * probe), w0)
    check_gradient(lambda t: ad.mean(ad.conv2d(Tensor(x0), Tensor(w0), t, pad=1) * probe), b0)


def test_conv2d_strided_gradient():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 3, 8, 8))
    w0 = rng.standard_normal((5, 3, 3, 3)) * 0.4
    check_gradient(lambda t: ad.mean(ad.conv2d(t, Tensor(w0), stride=2, pad=1)), x0)
    check_gradient(lambda t: ad.mean(ad.conv2d(Tensor(x0), t, stride=2, pad=1)), w0)


def test_conv_transpose_gradient():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((1, 3, 4, 4))
    w0 = rng.standard_normal((3, 2, 4, 4)) * 0.4
    probe = Tensor(rng.standard_normal((1, 2, 8, 8)))
    check_gradient(lambda t: ad.mean(ad.conv_transpose2d(t, Tensor(w0), stride=2, pad=1) * probe), x0)
    check_gradient(lambda t: ad.mean(ad.conv_transpose2d(Tensor(x0), t, stride=2, pad=1) * probe), w0)


def test_upsample_crop_channelmix_gradients():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((2, 3, 4, 4))
    m0 = rng.standard_normal((5, 3))
    bq = rng.standard_normal((2, 3, 3))
    check_gradient(lambda t: ad.mean(ad.upsample_nearest2x(t)), x0)
    check_gradient(lambda t: ad.mean(ad.crop2d(t, 1, 3, 0, 2)), x0)
    check_gradient(lambda t: ad.mean(ad.channel_matmul(Tensor(m0), t)), x0)
    check_gradient(lambda t: ad.mean(ad.channel_matmul(t, Tensor(x0))), m0)
    check_gradient(lambda t: ad.mean(ad.batch_channel_matmul(Tensor(bq), t)), x0)
    check_gradient(lambda t: ad.mean(ad.batch_channel_matmul(t, Tensor(x0))), bq)


def test_group_norm_statistics_and_gradient():
    rng = np.random.default_rng(7)
    gn = GroupNorm(8, groups=4, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 8, 6, 6)).astype(np.float64))
    y = gn(x).data.reshape(2, 4, 2 * 36)
    assert np.max(np.abs(y.mean(axis=2))) < 1e-5
    assert np.max(np.abs(y.var(axis=2) - 1.0)) < 1e-4

    gn64 = GroupNorm(4, groups=2, dtype=np.float64)
    check_gradient(lambda t: ad.mean(ad.silu(gn64(t))), rng.standard_normal((1, 4, 5, 5)))


def test_film_zero_init_is_identity():
    rng = np.random.default_rng(8)
    film = FiLM(rng, embed_dim=6, channels=3)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    emb = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
    out = film(x, emb)
    assert np.array_equal(out.data, x.data)


def test_film_gradient_through_head():
    rng = np.random.default_rng(9)
    film = FiLM(rng, embed_dim=4, channels=2, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    w0 = rng.standard_normal((4, 4))

    def build(t):
        film.head.weight = t
        y = film(x, Tensor(np.ones((1, 4))))
        return ad.mean(y * y)

    t = Tensor(w0.copy(), requires_grad=True)
    loss = build(t)
    loss.backward()
    analytic = t.grad

    def scalar(w):
        film.head.weight = Tensor(w.copy())
        y = film(x, Tensor(np.ones((1, 4))))
        return float(ad.mean(y * y).data)

    numeric = numerical_gradient(scalar, w0)
    rel = np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6))
    assert rel < RTOL


def test_lora_zero_adapter_is_noop():
    rng = np.random.default_rng(10)
    base = Conv2d(rng, 3, 5, k=3, pad=1)
    lora = LoraConv2d(rng, base, rank=2)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
    assert np.array_equal(lora(x).data, base(x).data)


def test_lora_factored_matches_merged_dense():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        d, k, r = rng.integers(4, 24), rng.integers(4, 24), int(rng.integers(1, 4))
        w = rng.standard_normal((d, k))
        a = rng.standard_normal((d, r))
        b = rng.standard_normal((r, k))
        q = rng.standard_normal((r, r))
        x = rng.standard_normal((k, 7))
        factored = lora_forward(x, w, a, b, q)
        merged = (w + a @ q @ b) @ x
        rel = np.max(np.abs(factored - merged)) / max(np.max(np.abs(merged)), 1e-12)
        worst = max(worst, rel)
    assert worst <= 1e-6


def test_lora_conv_factored_matches_merged_kernel():
    rng = np.random.default_rng(12)
    base = Conv2d(rng, 4, 6, k=3, pad=1, dtype=np.float64)
    lora = LoraConv2d(rng, base, rank=3, dtype=np.float64)
    lora.a_matrix.data = rng.standard_normal(lora.a_matrix.shape)
    q = rng.standard_normal((3, 3))
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    factored = lora(x, Tensor(q)).data
    merged = ad.conv2d(x, Tensor(lora.merged_weight(q)), lora.base.bias, pad=1).data
    rel = np.max(np.abs(factored - merged)) / np.max(np.abs(merged))
    assert rel < 1e-10


def test_lora_identity_q_equals_plain_lora():
    rng = np.random.default_rng(13)
    base = Conv2d(rng, 3, 4, k=3, pad=1)
    lora = LoraConv2d(rng, base, rank=2)
    lora.a_matrix.data = rng.standard_normal(lora.a_matrix.shape).astype(np.float32)
    x = Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
    eye = Tensor(np.eye(2, dtype=np.float32))
    with_q = lora(x, eye).data
    plain = lora(x).data
    assert np.allclose(with_q, plain, atol=1e-6)


def test_lora_rank_cap():
    rng = np.random.default_rng(14)
    base = Conv2d(rng, 2, 4, k=1, pad=0)  # min(4, 2) // 2 = 1
    lora = LoraConv2d(rng, base, rank=2)
    assert lora.rank == 1  # capped to keep the adapter genuinely low-rank
    with pytest.raises(ValueError):
        LoraConv2d(rng, base, rank=2, strict_rank=True)


def test_lora_base_frozen_under_training_steps():
    rng = np.random.default_rng(15)
    base = Conv2d(rng, 3, 4, k=3, pad=1)
    base.weight.requires_grad = False
    base.bias.requires_grad = False
    lora = LoraConv2d(rng, base, rank=2)
    w_before = base.weight.data.copy()
    opt = Adam([lora.a_matrix, lora.b_matrix], lr=1e-2)
    for step in range(100):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
        out = lora(x, Tensor(np.eye(2, dtype=np.float32)))
        loss = ad.mean(out * out)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert base.weight.data.tobytes() == w_before.tobytes()
    assert base.weight.grad is None


def _toy_map(rng, n=3):
    return DegradationMap(
        fwhm_grid=(rng.random((n, n)) * 5 + 1).astype(np.float32),
        quality_grid=(rng.random((n, n)) * 80 + 10).astype(np.float32),
    )


def test_svda_identity_at_init():
    rng = np.random.default_rng(16)
    att = SvdaAttention(rng, grid_n=3, rank=4)
    q = svda_q(att, _toy_map(rng))
    assert np.array_equal(q, np.eye(4, dtype=np.float32))


def test_svda_varies_after_training_step():
    rng = np.random.default_rng(17)
    att = SvdaAttention(rng, grid_n=3, rank=4)
    m1, m2 = _toy_map(rng), _toy_map(rng)
    feats = Tensor(np.stack([standardize_map(m1), standardize_map(m2)]))
    opt = Adam([t for _, t in att.params()], lr=1e-2)
    q = att.forward(feats)
    loss = ad.mean(q * Tensor(np.arange(32, dtype=np.float32).reshape(2, 4, 4)))
    loss.backward()
    opt.step()
    q1 = svda_q(att, m1)
    q2 = svda_q(att, m2)
    assert not np.array_equal(q1, np.eye(4, dtype=np.float32))
    assert not np.array_equal(q1, q2)


def test_svda_grid_mismatch():
    rng = np.random.default_rng(18)
    att = SvdaAttention(rng, grid_n=3, rank=4)
    with pytest.raises(ValueError):
        svda_q(att, _toy_map(rng, n=5))


def test_svda_gradient_matches_finite_differences():
    rng = np.random.default_rng(19)
    att = SvdaAttention(rng, grid_n=2, rank=2, hidden=5, dtype=np.float64)
    feats_np = rng.standard_normal((2, 8))
    probe = rng.standard_normal((2, 2, 2))
    w0 = rng.standard_normal((8, 5)) * 0.3

    def build(t):
        att.fc1.weight = t
        return ad.mean(att.forward(Tensor(feats_np)) * Tensor(probe))

    t = Tensor(w0.copy(), requires_grad=True)
    build(t).backward()
    analytic = t.grad

    def scalar(w):
        att.fc1.weight = Tensor(w.copy())
        return float(ad.mean(att.forward(Tensor(feats_np)) * Tensor(probe)).data)

    numeric = numerical_gradient(scalar, w0)
    rel = np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6))
    assert rel < RTOL


def test_losses_zero_on_equal_inputs():
    rng = np.random.default_rng(20)
    x = Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))
    assert float(l2_loss(x, x).data) == 0.0
    assert float(perceptual_proxy_loss(x, x).data) == 0.0


def test_proxy_loss_sensitive_to_blur_not_offset():
    rng = np.random.default_rng(21)
    img = np.zeros((1, 1, 32, 32), dtype=np.float32)
    img[:, :, 8:24, 8:24] = 1.0
    img += rng.normal(0, 0.05, img.shape).astype(np.float32)
    from scipy import ndimage

    blurred = ndimage.gaussian_filter(img[0, 0], 2.0)[None, None]
    proxy_blur = float(perceptual_proxy_loss(Tensor(img), Tensor(blurred.astype(np.float32))).data)
    proxy_offset = float(perceptual_proxy_loss(Tensor(img), Tensor(img + np.float32(1e-3))).data)
    assert proxy_blur > proxy_offset


def test_total_loss_weighting_exact():
    rng = np.random.default_rng(22)
    from metalens.nn import reconstruction_loss

    a = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    b = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    total, l2, proxy = reconstruction_loss(a, b, perceptual_weight=2.5)
    assert np.isclose(float(total.data), float(l2.data) + 2.5 * float(proxy.data), rtol=1e-6)


def test_l2_and_proxy_gradients():
    rng = np.random.default_rng(23)
    target = Tensor(rng.random((1, 2, 8, 8)))
    check_gradient(lambda t: l2_loss(t, target), rng.random((1, 2, 8, 8)))
    check_gradient(
        lambda t: perceptual_proxy_loss(t, target, scales=2),
        rng.random((1, 2, 8, 8)) + 0.2,
        rtol=5e-4,
    )


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    state = adam_step([p], [np.zeros(3)], {}, lr=0.1)
    assert np.array_equal(p, [1.0, -2.0, 3.0])
    adam_step([p], [None], state, lr=0.1)
    assert np.array_equal(p, [1.0, -2.0, 3.0])


def test_adam_quadratic_bowl_convergence():
    rng = np.random.default_rng(24)
    p = rng.uniform(-1, 1, 8)
    state = {}
    for _ in range(500):
        adam_step([p], [2.0 * p], state, lr=0.1)
    assert np.linalg.norm(p) < 1e-3


def test_adam_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(25)
        p = rng.uniform(-1, 1, 6)
        state = {}
        trace = []
        for _ in range(50):
            adam_step([p], [2.0 * p + np.sin(p)], state, lr=0.05)
            trace.append(p.copy())
        return np.stack(trace)

    assert np.array_equal(run(), run())


def test_linear_and_conv_layer_params_train():
    rng = np.random.default_rng(26)
    lin = Linear(rng, 4, 3)
    conv = ConvTranspose2d(rng, 3, 2, k=4, stride=2, pad=1)
    x = Tensor(rng.standard_normal((5, 4)).astype(np.float32))
    y = lin(x)
    assert y.shape == (5, 3)
    xi = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    yo = conv(xi)
    assert yo.shape == (1, 2, 16, 16)
