"""Differentiable layer primitives (numpy forward + hand-written backward).

Convolution uses im2col + GEMM; the naive sliding-window version lives in the
test suite as an independent oracle.  Every op records itself on the active
tape (if any) and is pure given its inputs and rng.
"""

import numpy as np

from .tensor import ShapeError, Tensor, active_tape, check_finite


def _emit(inputs, out_data, backward_fn, what):
    check_finite(out_data, what)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def _reduce_axes_keep(grad, axes):
    return grad.sum(axis=axes)


# ---------------------------------------------------------------------------
# Convolution

def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    sn, sc, sh, sw = img.strides
    view = np.lib.stride_tricks.as_strided(
        img, (n, oh, ow, c, kh, kw), (sn, sh * stride, sw * stride, sc, sh, sw))
    return view.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    col = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += col[:, :, i, j]
    return img[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlate NCHW input with OIKK kernels (no bias)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW x and OIKK w, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernel {w.shape} expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects square kernels, got {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(o, -1)
    out = (cols @ w2.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward_fn(gout):
        g2 = gout.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = _col2im(g2 @ w2, x.shape, kh, kw, stride, pad, oh, ow)
        return gx, gw

    return _emit((x, w), np.ascontiguousarray(out), backward_fn, "conv2d")


# ---------------------------------------------------------------------------
# Batch normalization

class BatchNormState:
    """Running statistics for one batchnorm layer (not trained)."""

    def __init__(self, channels, dtype="float32", momentum=0.1, eps=1e-5):
        npdtype = np.float32 if dtype == "float32" else np.float64
        self.mean = np.zeros(channels, dtype=npdtype)
        self.var = np.ones(channels, dtype=npdtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x, gamma, beta, stats, mode):
    """Per-channel normalization over (N, H, W); train mode updates stats."""
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    if gamma.size != c or beta.size != c:
        raise ShapeError(
            f"batchnorm2d channel mismatch: input has {c} channels, "
            f"gamma has {gamma.size}, beta has {beta.size}")
    g = gamma.data.reshape(1, c, 1, 1)
    b = beta.data.reshape(1, c, 1, 1)
    eps = stats.eps

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean += stats.momentum * (mu - stats.mean)
        stats.var += stats.momentum * (var - stats.var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = g * xhat + b

        def backward_fn(gout):
            axes = (0, 2, 3)
            gbeta = gout.sum(axis=axes)
            ggamma = (gout * xhat).sum(axis=axes)
            gxhat = gout * g
            m = gout.shape[0] * gout.shape[2] * gout.shape[3]
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            return gx.astype(x.data.dtype, copy=False), ggamma, gbeta
    else:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = g * xhat + b

        def backward_fn(gout):
            gbeta = gout.sum(axis=(0, 2, 3))
            ggamma = (gout * xhat).sum(axis=(0, 2, 3))
            gx = gout * g * inv.reshape(1, c, 1, 1)
            return gx.astype(x.data.dtype, copy=False), ggamma, gbeta

    return _emit((x, gamma, beta), out.astype(x.data.dtype, copy=False), backward_fn, "batchnorm2d")


# ---------------------------------------------------------------------------
# Pointwise and structural ops

def relu(x):
    mask = x.data > 0
    return _emit((x,), np.where(mask, x.data, 0), lambda g: (g * mask,), "relu")


def sigmoid(x):
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    s = s.astype(z.dtype, copy=False)
    return _emit((x,), s, lambda g: (g * s * (1 - s),), "sigmoid")


def exp(x):
    e = np.exp(x.data)
    return _emit((x,), e, lambda g: (g * e,), "exp")


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit((a, b), a.data + b.data, lambda g: (g, g), "add")


def scale(x, c):
    """Multiply by a python constant (no gradient to the constant)."""
    c = float(c)
    return _emit((x,), x.data * np.asarray(c, dtype=x.data.dtype),
                 lambda g: (g * c,), "scale")


def mul_scalar(x, s):
    """Multiply a tensor by a trainable scalar tensor (shape () or (1,))."""
    if s.size != 1:
        raise ShapeError(f"mul_scalar expects a scalar tensor, got shape {s.shape}")
    sval = s.data.reshape(())

    def backward_fn(gout):
        return gout * sval, np.asarray((gout * x.data).sum(), dtype=s.data.dtype).reshape(s.shape)

    return _emit((x, s), x.data * sval, backward_fn, "mul_scalar")


def mul_channelwise(x, s):
    """Scale each (n, c) feature plane of NCHW x by s[n, c]."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"mul_channelwise: x {x.shape} needs s of shape {x.shape[:2]}, got {s.shape}")
    s4 = s.data[:, :, None, None]

    def backward_fn(gout):
        return gout * s4, (gout * x.data).sum(axis=(2, 3))

    return _emit((x, s), x.data * s4, backward_fn, "mul_channelwise")


def concat_channels(xs):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    base = xs[0].shape
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels shape mismatch: {[t.shape for t in xs]}")
    sizes = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward_fn(gout):
        return tuple(np.split(gout, np.cumsum(sizes)[:-1], axis=1))

    return _emit(tuple(xs), out, backward_fn, "concat_channels")


def _slice_channels(x, start, size):
    sl = (slice(None), slice(start, start + size))

    def backward_fn(gout):
        gx = np.zeros_like(x.data)
        gx[sl] = gout
        return (gx,)

    return _emit((x,), x.data[sl].copy(), backward_fn, "slice_channels")


def split_channels(x, sizes):
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {sizes} do not sum to {x.shape[1]} channels")
    if any(s <= 0 for s in sizes):
        raise ShapeError(f"split_channels: sizes must be positive, got {sizes}")
    outs, start = [], 0
    for s in sizes:
        outs.append(_slice_channels(x, start, s))
        start += s
    return outs


def avgpool2d(x, k, stride):
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"avgpool2d: window {k} larger than input {x.shape}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out /= k * k

    def backward_fn(gout):
        gx = np.zeros_like(x.data)
        gshare = gout / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gshare
        return (gx,)

    return _emit((x,), out, backward_fn, "avgpool2d")


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(gout):
        return (np.broadcast_to(gout[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype),)

    return _emit((x,), out, backward_fn, "global_avg_pool")


def broadcast_plane(s, n, channels, h, w):
    """Fill an (n, channels, h, w) tensor with a scalar tensor's value."""
    if s.size != 1:
        raise ShapeError(f"broadcast_plane expects a scalar tensor, got shape {s.shape}")
    out = np.full((n, channels, h, w), s.data.reshape(()), dtype=s.data.dtype)

    def backward_fn(gout):
        return (np.asarray(gout.sum(), dtype=s.data.dtype).reshape(s.shape),)

    return _emit((s,), out, backward_fn, "broadcast_plane")


def fully_connected(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fully_connected: bias {b.shape} must be ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    def backward_fn(gout):
        return gout @ w.data.T, x.data.T @ gout, gout.sum(axis=0)

    return _emit((x, w, b), out, backward_fn, "fully_connected")


def dropout(x, p, mode, rng):
    """Zero activations with probability p in train mode, scaling survivors.

    Eval mode and p == 0 are exact identities (the input tensor is returned).
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0:
        return x
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    keep = (rng.random(x.shape, dtype=draw_dtype) >= p) / np.asarray(1 - p, dtype=x.data.dtype)
    keep = keep.astype(x.data.dtype, copy=False)
    return _emit((x,), x.data * keep, lambda g: (g * keep,), "dropout")


def sum_all(x):
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(())

    def backward_fn(gout):
        return (np.full(x.shape, gout.reshape(()), dtype=x.data.dtype),)

    return _emit((x,), out, backward_fn, "sum_all")


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} rows need {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), "
                         f"got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = np.asarray(nll.mean(), dtype=logits.data.dtype).reshape(())

    def backward_fn(gout):
        g = probs.copy()
        g[np.arange(n), labels] -= 1
        return (g * (gout.reshape(()) / n),)

    return _emit((logits,), out, backward_fn, "softmax_cross_entropy")
