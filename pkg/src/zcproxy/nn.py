"""Network layers built from autodiff primitives, plus parameter handling.

All layers are functional: they take parameter Tensors explicitly so the
same code path serves normal scoring, weight-substituted passes (synflow,
zen) and in-place SGD updates.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DegenerateBatchError(ValueError):
    """Batch statistics were requested on a batch that is too small."""


# cache of im2col gather indices keyed by geometry
_IM2COL_IDX = {}


def _im2col_indices(n, c, h, w, k, stride, pad):
    key = (n, c, h, w, k, stride, pad)
    idx = _IM2COL_IDX.get(key)
    if idx is not None:
        return idx
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    # flat index of (ci, y+dy, x+dx) in a (c, hp, wp) block, per output pos
    ci, dy, dx = np.meshgrid(np.arange(c), np.arange(k), np.arange(k),
                             indexing="ij")
    patch = (ci * hp * wp + dy * wp + dx).reshape(-1)  # (c*k*k,)
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    origin = (oy * stride * wp + ox * stride).reshape(-1)  # (ho*wo,)
    base = patch[:, None] + origin[None, :]  # (c*k*k, ho*wo)
    offsets = np.arange(n) * (c * hp * wp)
    idx = (base[None, :, :] + offsets[:, None, None]).astype(np.int64)
    _IM2COL_IDX[key] = idx
    return idx


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    idx = _im2col_indices(n, c, h, w, k, stride, pad)
    return ad.gather(ad.pad2d(x, pad), idx)  # (n, c*k*k, ho*wo)


def conv2d(x, weight, stride=1, padding=0):
    """2-D convolution, NCHW input and OIHW weight, no bias.

    Kernel size must be 1 or 3 (the only sizes the cell space uses).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ad.ShapeError(f"conv2d expects 4-D tensors, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ad.ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if i != c:
        raise ad.ShapeError(f"conv2d channel mismatch: input {c}, weight {i}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ad.ShapeError("conv2d spatial dims too small for kernel")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = im2col(x, kh, stride, padding)  # (n, c*k*k, L)
    cols = ad.reshape(ad.transpose(cols, (1, 0, 2)), (c * kh * kw, n * ho * wo))
    wmat = ad.reshape(weight, (o, c * kh * kw))
    out = ad.matmul(wmat, cols)  # (o, n*L)
    return ad.transpose(ad.reshape(out, (o, n, ho, wo)), (1, 0, 2, 3))


def avgpool3x3(x):
    """3x3 average pooling, stride 1, zero padding 1 (pad counts in the mean)."""
    n, c, h, w = x.shape
    cols = im2col(x, 3, 1, 1)  # (n, c*9, h*w)
    cols = ad.reshape(cols, (n, c, 9, h * w))
    out = ad.mul_scalar(ad.sum_(cols, axis=2), 1.0 / 9.0)
    return ad.reshape(out, (n, c, h, w))


def global_avg_pool(x):
    n, c, h, w = x.shape
    return ad.mul_scalar(ad.sum_(x, axis=(2, 3)), 1.0 / (h * w))


def linear(x, weight, bias):
    out = ad.matmul(x, ad.transpose(weight, (1, 0)))
    return ad.add(out, bias)


def relu(x):
    return ad.relu(x)


def batchnorm(x, gamma, beta, mode="batch", eps=1e-5, frozen_stats=None,
              capture=None):
    """Per-channel batch normalization over an NCHW tensor.

    mode "batch" normalizes with the current batch's statistics (needs
    N >= 2), "identity" passes the input through untouched, "frozen"
    normalizes with externally supplied (mean, var) arrays. When `capture`
    is given, the per-channel batch std (mean over channels) and the layer
    output are recorded on it.
    """
    n, c, h, w = x.shape
    if mode == "identity":
        if capture is not None:
            capture.record_bn(float(np.mean(np.std(x.data, axis=(0, 2, 3)))), x)
        return x
    if mode == "batch":
        if n < 2:
            raise DegenerateBatchError(f"batch statistics need N >= 2, got N={n}")
        count = n * h * w
        mu = ad.mul_scalar(ad.sum_(x, axis=(0, 2, 3), keepdims=True), 1.0 / count)
        d = ad.sub(x, mu)
        var = ad.mul_scalar(ad.sum_(ad.pow_const(d, 2.0), axis=(0, 2, 3),
                                    keepdims=True), 1.0 / count)
        inv = ad.pow_const(ad.add_scalar(var, eps), -0.5)
        xhat = ad.mul(d, inv)
    elif mode == "frozen":
        mu0, var0 = frozen_stats
        mu = Tensor(mu0.reshape(1, c, 1, 1))
        inv = Tensor(1.0 / np.sqrt(var0.reshape(1, c, 1, 1) + eps))
        xhat = ad.mul(ad.sub(x, mu), inv)
    else:
        raise ValueError(f"unknown batchnorm mode: {mode}")
    g = ad.reshape(gamma, (1, c, 1, 1))
    b = ad.reshape(beta, (1, c, 1, 1))
    out = ad.add(ad.mul(xhat, g), b)
    if capture is not None:
        capture.record_bn(float(np.mean(np.std(x.data, axis=(0, 2, 3)))), out)
    return out


def batch_stats(x):
    """Per-channel (mean, biased var) of an NCHW array, for frozen-mode BN."""
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax at the true labels. Returns a scalar Tensor."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ad.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    m = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = ad.sub(logits, m)
    lse = ad.add(ad.log(ad.sum_(ad.exp(z), axis=1, keepdims=True)), m)
    logp = ad.sub(logits, lse)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.mul(logp, Tensor(onehot))
    return ad.mul_scalar(ad.sum_(picked), -1.0 / n)


def softmax(logits_data):
    """Numerically stable softmax on a plain array (no graph)."""
    z = logits_data - np.max(logits_data, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


class ParamSet:
    """Ordered name -> parameter Tensor map with a recorded init seed.

    Iteration order is insertion order, which doubles as the canonical
    flattening order for gradient and Hessian vectors.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._params = {}

    def add(self, name, tensor):
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def total_size(self):
        return sum(t.size for t in self._params.values())

    def flatten(self):
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_bytes(self):
        """Deterministic byte serialization, used by determinism checks."""
        chunks = []
        for name, t in self._params.items():
            chunks.append(name.encode())
            chunks.append(t.data.tobytes())
        return b"".join(chunks)


def kaiming_normal(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return rng.standard_normal(shape) * std


def init_conv(params, name, rng, out_ch, in_ch, k):
    w = kaiming_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k)
    return params.add(name, Tensor(w))


def init_bn(params, name, rng, ch):
    gamma = params.add(name + ".gamma", Tensor(np.ones(ch)))
    beta = params.add(name + ".beta", Tensor(np.zeros(ch)))
    return gamma, beta


def init_linear(params, name, rng, out_f, in_f):
    w = kaiming_normal(rng, (out_f, in_f), in_f)
    weight = params.add(name + ".weight", Tensor(w))
    bias = params.add(name + ".bias", Tensor(np.zeros(out_f)))
    return weight, bias
