"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap ndarray values and build a tape of backward closures; calling
`backward()` on a scalar runs the tape in reverse topological order. Float32
is the training dtype; float64 graphs are supported for finite-difference
gradient checks (ops preserve the input dtype).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # numpy scalar: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ grad)

    return Tensor(out_data, parents=(a, b), backward=backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad.reshape(old_shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size

    def backward(grad):
        if not a.requires_grad:
            return
        g = grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / count)

    return Tensor(out_data, parents=(a,), backward=backward)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        if not a.requires_grad:
            return
        g = grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, parents=(a,), backward=backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * s * (1.0 - s))

    return Tensor(s, parents=(a,), backward=backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * (s * (1.0 + a.data * (1.0 - s))))

    return Tensor(out_data, parents=(a,), backward=backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    root = np.sqrt(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * 0.5 / root)

    return Tensor(root, parents=(a,), backward=backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * sign)

    return Tensor(np.abs(a.data), parents=(a,), backward=backward)


def crop_cols(a, c0: int, c1: int) -> Tensor:
    """Slice columns [c0:c1) of a 2-D tensor."""
    a = as_tensor(a)

    def backward(grad):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, c0:c1] = grad
            a._accumulate(g)

    return Tensor(a.data[:, c0:c1], parents=(a,), backward=backward)


def crop_qblock(a, r: int) -> Tensor:
    """Leading (r, r) block of each matrix in a (B, R, R) stack."""
    a = as_tensor(a)

    def backward(grad):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, :r, :r] = grad
            a._accumulate(g)

    return Tensor(a.data[:, :r, :r], parents=(a,), backward=backward)


def crop2d(a, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Crop rows [y0:y1) and columns [x0:x1) of an NCHW tensor."""
    a = as_tensor(a)

    def backward(grad):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, :, y0:y1, x0:x1] = grad
            a._accumulate(g)

    return Tensor(a.data[:, :, y0:y1, x0:x1], parents=(a,), backward=backward)


# -- convolution machinery ---------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    view = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, OH, OW, kh, kw) -> (B, C*kh*kw, OH*OW)
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), (oh, ow)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride] += cols[:, :, u, v]
    return out[:, :, pad : pad + h, pad : pad + w] if pad else out


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation) with an (OC, IC, kh, kw) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    oc, ic, kh, kw = weight.shape
    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, pad)
    w_flat = weight.data.reshape(oc, ic * kh * kw)
    out_data = (w_flat @ cols).reshape(x.shape[0], oc, oh, ow)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, oc, 1, 1)
        parents.append(bias)

    def backward(grad):
        grad_flat = grad.reshape(grad.shape[0], oc, oh * ow)
        if weight.requires_grad:
            gw = np.einsum("boi,bci->oc", grad_flat, cols, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.einsum("oc,boi->bci", w_flat, grad_flat, optimize=True)
            x._accumulate(_col2im(dcols, x.shape, kh, kw, stride, pad))

    return Tensor(out_data, parents=tuple(parents), backward=backward)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, pad: int = 1) -> Tensor:
    """NCHW transposed convolution with an (IC, OC, kh, kw) kernel.

    Output size is (H_in - 1) * stride - 2 * pad + kh.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    ic, oc, kh, kw = weight.shape
    b, _, h, w = x.shape
    out_h = (h - 1) * stride - 2 * pad + kh
    out_w = (w - 1) * stride - 2 * pad + kw
    w_flat = weight.data.reshape(ic, oc * kh * kw)
    cols = np.einsum("io,bih->boh", w_flat, x.data.reshape(b, ic, h * w), optimize=True)
    out_data = _col2im(cols, (b, oc, out_h, out_w), kh, kw, stride, pad)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, oc, 1, 1)
        parents.append(bias)

    def backward(grad):
        gcols, _ = _im2col(grad, kh, kw, stride, pad)  # (B, OC*kh*kw, H*W)
        if x.requires_grad:
            gx = np.einsum("io,boh->bih", w_flat, gcols, optimize=True)
            x._accumulate(gx.reshape(x.shape))
        if weight.requires_grad:
            gw = np.einsum("bih,boh->io", x.data.reshape(b, ic, h * w), gcols, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))

    return Tensor(out_data, parents=tuple(parents), backward=backward)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(grad):
        if x.requires_grad:
            b, c, h2, w2 = grad.shape
            g = grad.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
            x._accumulate(g)

    return Tensor(out_data, parents=(x,), backward=backward)


def channel_matmul(m, x) -> Tensor:
    """Mix channels with a shared (OC, IC) matrix: out[b, o] = sum_i m[o, i] * x[b, i]."""
    m, x = as_tensor(m), as_tensor(x)
    out_data = np.einsum("oi,bihw->bohw", m.data, x.data, optimize=True)

    def backward(grad):
        if m.requires_grad:
            m._accumulate(np.einsum("bohw,bihw->oi", grad, x.data, optimize=True))
        if x.requires_grad:
            x._accumulate(np.einsum("oi,bohw->bihw", m.data, grad, optimize=True))

    return Tensor(out_data, parents=(m, x), backward=backward)


def batch_channel_matmul(m, x) -> Tensor:
    """Per-sample channel mixing: out[b, o] = sum_i m[b, o, i] * x[b, i]."""
    m, x = as_tensor(m), as_tensor(x)
    out_data = np.einsum("boi,bihw->bohw", m.data, x.data, optimize=True)

    def backward(grad):
        if m.requires_grad:
            m._accumulate(np.einsum("bohw,bihw->boi", grad, x.data, optimize=True))
        if x.requires_grad:
            x._accumulate(np.einsum("boi,bohw->bihw", m.data, grad, optimize=True))

    return Tensor(out_data, parents=(m, x), backward=backward)


# -- optimizer ----------------------------------------------------------------


def adam_step(params, grads, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over parallel lists of value/gradient arrays (in place).

    `state` holds "t" plus first/second moment arrays keyed by parameter index;
    an empty dict is initialized on first use. Zero gradients leave parameters
    with zero update (the bias-corrected moments stay zero).
    """
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Adam over a list of Tensors (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr
        self.state: dict = {}

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def numerical_gradient(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x (float64)."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
