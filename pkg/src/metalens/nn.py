"""Network building blocks: layers, LoRA adapters, degradation attention, losses.

All layers expose `params()` as (name, Tensor) pairs for optimizers and model
serialization. Base weights that LoRA adapts are frozen by flipping their
`requires_grad` flag; adapter matrices remain trainable.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .degradation import DegradationMap


def _param(rng, shape, scale, dtype=np.float32) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def _zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d:
    def __init__(self, rng, in_ch, out_ch, k=3, stride=1, pad=1, dtype=np.float32, zero_init=False):
        fan_in = in_ch * k * k
        self.weight = _zeros((out_ch, in_ch, k, k), dtype) if zero_init else _param(
            rng, (out_ch, in_ch, k, k), math.sqrt(2.0 / fan_in), dtype
        )
        self.bias = _zeros((out_ch,), dtype)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ConvTranspose2d:
    def __init__(self, rng, in_ch, out_ch, k=4, stride=2, pad=1, dtype=np.float32):
        fan_in = in_ch * k * k
        self.weight = _param(rng, (in_ch, out_ch, k, k), math.sqrt(2.0 / fan_in), dtype)
        self.bias = _zeros((out_ch,), dtype)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Linear:
    def __init__(self, rng, in_dim, out_dim, dtype=np.float32, zero_init=False):
        self.weight = _zeros((in_dim, out_dim), dtype) if zero_init else _param(
            rng, (in_dim, out_dim), math.sqrt(1.0 / in_dim), dtype
        )
        self.bias = _zeros((out_dim,), dtype)

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GroupNorm:
    def __init__(self, channels, groups=4, eps=1e-5, dtype=np.float32):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x):
        b, c, h, w = x.shape
        g = self.groups
        grouped = ad.reshape(x, (b, g, (c // g) * h * w))
        mu = ad.mean(grouped, axis=2, keepdims=True)
        centered = grouped - mu
        var = ad.mean(centered * centered, axis=2, keepdims=True)
        normed = centered * _reciprocal(ad.sqrt(var + self.eps))
        out = ad.reshape(normed, (b, c, h, w))
        return out * self.gamma + self.beta

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def _reciprocal(t: Tensor) -> Tensor:
    inv = 1.0 / t.data

    def backward(grad):
        if t.requires_grad:
            t._accumulate(-grad * inv * inv)

    return Tensor(inv, parents=(t,), backward=backward)


class FiLM:
    """Embedding-conditioned per-channel scale/shift; zero-init = identity."""

    def __init__(self, rng, embed_dim, channels, dtype=np.float32):
        self.head = Linear(rng, embed_dim, 2 * channels, dtype=dtype, zero_init=True)
        self.channels = channels

    def __call__(self, x, emb):
        b = x.shape[0]
        sh = self.head(emb)  # (B, 2C)
        scale = ad.reshape(ad.crop_cols(sh, 0, self.channels), (b, self.channels, 1, 1))
        shift = ad.reshape(ad.crop_cols(sh, self.channels, 2 * self.channels), (b, self.channels, 1, 1))
        return x * (1.0 + scale) + shift

    def params(self):
        return [(f"head.{n}", t) for n, t in self.head.params()]


class LoraConv2d:
    """Frozen-base convolution with a trainable low-rank bypass A @ Q @ B.

    The bypass evaluates in factored form: project to `rank` channels with B
    (same geometry as the base kernel), mix with the attention matrix Q, and
    expand to the output channels with A. A starts at zero, so a fresh adapter
    leaves the base mapping untouched.
    """

    def __init__(self, rng, base: Conv2d, rank: int, dtype=np.float32, strict_rank: bool = False):
        oc, ic, kh, kw = base.weight.shape
        cap = min(oc, ic * kh * kw) // 2
        if strict_rank and rank > cap:
            raise ValueError(f"rank {rank} too large for a {oc}x{ic * kh * kw} base weight")
        # the adapter must stay low-rank per layer; narrow layers (e.g. latent
        # projections) use the leading block of a wider shared attention matrix
        self.rank = min(rank, cap)
        if self.rank < 1:
            raise ValueError(f"base weight {oc}x{ic * kh * kw} too small for any adapter")
        self.base = base
        self.a_matrix = _zeros((oc, self.rank), dtype)
        self.b_matrix = _param(rng, (self.rank, ic * kh * kw), math.sqrt(1.0 / (ic * kh * kw)), dtype)
        self.kernel_geom = (kh, kw)

    def __call__(self, x, q=None):
        out = self.base(x)
        oc, ic, kh, kw = self.base.weight.shape
        b_kernel = ad.reshape(self.b_matrix, (self.rank, ic, kh, kw))
        low = ad.conv2d(x, b_kernel, stride=self.base.stride, pad=self.base.pad)
        if q is not None:
            if q.data.ndim == 3:
                if q.shape[1] > self.rank:
                    q = ad.crop_qblock(q, self.rank)
                low = ad.batch_channel_matmul(q, low)
            else:
                qm = q if q.shape[0] == self.rank else ad.Tensor(q.data[: self.rank, : self.rank])
                low = ad.channel_matmul(qm, low)
        return out + ad.channel_matmul(self.a_matrix, low)

    def merged_weight(self, q: np.ndarray | None = None) -> np.ndarray:
        """Dense base + A Q B kernel (oracle/inspection path, not used in training)."""
        oc, ic, kh, kw = self.base.weight.shape
        qm = np.eye(self.rank, dtype=self.a_matrix.dtype) if q is None else q[: self.rank, : self.rank]
        delta = self.a_matrix.data @ qm @ self.b_matrix.data
        return self.base.weight.data + delta.reshape(oc, ic, kh, kw)

    def params(self):
        return [("a", self.a_matrix), ("b", self.b_matrix)] + [(f"base.{n}", t) for n, t in self.base.params()]


def standardize_map(dmap: DegradationMap) -> np.ndarray:
    """Flatten (S_f || S_i), each grid standardized to zero mean / unit std."""
    parts = []
    for grid in (dmap.fwhm_grid, dmap.quality_grid):
        g = grid.astype(np.float32)
        std = float(g.std())
        parts.append(((g - g.mean()) / std if std > 1e-8 else np.zeros_like(g)).ravel())
    return np.concatenate(parts)


class SvdaAttention:
    """2-layer MLP from standardized (S_f, S_i) grids to an r x r mixing matrix.

    The output head is zero-initialized, so Q is exactly the identity until
    training moves it.
    """

    def __init__(self, rng, grid_n: int, rank: int, hidden: int = 32, dtype=np.float32):
        self.grid_n = grid_n
        self.rank = rank
        self.fc1 = Linear(rng, 2 * grid_n * grid_n, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, rank * rank, dtype=dtype, zero_init=True)

    def forward(self, features: Tensor) -> Tensor:
        """(B, 2n^2) standardized features -> (B, r, r) attention matrices."""
        b = features.shape[0]
        h = ad.silu(self.fc1(features))
        delta = ad.reshape(self.fc2(h), (b, self.rank, self.rank))
        eye = np.broadcast_to(np.eye(self.rank, dtype=delta.dtype), (b, self.rank, self.rank))
        return delta + Tensor(eye.copy())

    def params(self):
        return [(f"fc1.{n}", t) for n, t in self.fc1.params()] + [(f"fc2.{n}", t) for n, t in self.fc2.params()]


def svda_q(att: SvdaAttention, dmap: DegradationMap) -> np.ndarray:
    """Deterministic (r, r) attention matrix for one degradation map."""
    if dmap.grid_size != att.grid_n:
        raise ValueError(f"map grid {dmap.grid_size} vs attention grid {att.grid_n}")
    features = Tensor(standardize_map(dmap)[None, :])
    return att.forward(features).data[0]


def lora_forward(x: np.ndarray, w: np.ndarray, a: np.ndarray, b: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
    """Dense-algebra reference: W x + A (Q (B x)); x is (d_in,) or (d_in, batch)."""
    if q is None:
        q = np.eye(a.shape[1], dtype=a.dtype)
    return w @ x + a @ (q @ (b @ x))


# -- losses -------------------------------------------------------------------


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = pred - target
    return ad.mean(diff * diff)


def _grad_magnitude(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    flat = ad.reshape(x, (b * c, 1, h, w))
    kx = Tensor(np.array([[[[-1.0, 1.0]]]], dtype=x.dtype))
    ky = Tensor(np.array([[[[-1.0], [1.0]]]], dtype=x.dtype))
    dx = ad.conv2d(flat, kx, stride=1, pad=0)  # (BC, 1, H, W-1)
    dy = ad.conv2d(flat, ky, stride=1, pad=0)  # (BC, 1, H-1, W)
    dx = ad.crop2d(dx, 0, h - 1, 0, w - 1)
    dy = ad.crop2d(dy, 0, h - 1, 0, w - 1)
    return ad.sqrt(dx * dx + dy * dy + 1e-6)


def _halve(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    flat = ad.reshape(x, (b * c, 1, h, w))
    k = Tensor(np.full((1, 1, 2, 2), 0.25, dtype=x.dtype))
    pooled = ad.conv2d(flat, k, stride=2, pad=0)
    return ad.reshape(pooled, (b, c, h // 2, w // 2))


def perceptual_proxy_loss(pred: Tensor, target: Tensor, scales: int = 3) -> Tensor:
    """L1 between gradient magnitudes at `scales` dyadic scales, averaged."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    total = None
    p, t = pred, target
    for s in range(scales):
        if s > 0:
            p, t = _halve(p), _halve(t)
        term = ad.mean(ad.abs_(_grad_magnitude(p) - _grad_magnitude(t)))
        total = term if total is None else total + term
    return total * (1.0 / scales)


def reconstruction_loss(pred: Tensor, target: Tensor, perceptual_weight: float):
    l2 = l2_loss(pred, target)
    proxy = perceptual_proxy_loss(pred, target)
    return l2 + perceptual_weight * proxy, l2, proxy
