"""Neural-network layers over :mod:`bcastnet.tensor`.

All spatial layers use NCHW layout (batch, channels, mel bins, time frames).
Convolutions are cross-correlations computed one kernel offset at a time, so
each offset is a single BLAS contraction and no im2col buffer is built.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    apply_op,
    broadcast_to,
    concat,
    elementwise,
    matmul,
    reshape,
    take,
    transpose,
)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def _pads(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(before, after, out_size)`` along one spatial axis."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding == "valid":
        if size < k:
            raise ShapeError(f"window {k} larger than input extent {size}")
        return 0, 0, (size - k) // stride + 1
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2, out


def conv_output_hw(h: int, w: int, kernel, stride: int, padding: str) -> tuple[int, int]:
    return _pads(h, kernel[0], stride, padding)[2], _pads(w, kernel[1], stride, padding)[2]


def _offsets(kh, kw, stride, ho, wo):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(None), slice(None),
                         slice(i, i + stride * (ho - 1) + 1, stride),
                         slice(j, j + stride * (wo - 1) + 1, stride))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation, ``w`` shaped ``[out, in, kh, kw]``."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    pt, pb, ho = _pads(h, kh, stride, padding)
    pl, pr, wo = _pads(wd, kw, stride, padding)
    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt or pb or pl or pr else xd
    acc = np.zeros((o, n, ho, wo), dtype=xd.dtype)
    for i, j, sl in _offsets(kh, kw, stride, ho, wo):
        acc += np.tensordot(wdat[:, :, i, j], xp[sl], axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        for i, j, sl in _offsets(kh, kw, stride, ho, wo):
            gw[:, :, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            gx[sl] += np.tensordot(wdat[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gx[:, :, pt:pt + h, pl:pl + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return apply_op("conv2d", out, inputs, backward_fn)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                     padding: str = "same") -> Tensor:
    """Per-channel spatial correlation, ``w`` shaped ``[C, 1, kh, kw]``."""
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise kernel {w.shape} does not match {c} input channels")
    kh, kw = w.shape[2:]
    pt, pb, ho = _pads(h, kh, stride, padding)
    pl, pr, wo = _pads(wd, kw, stride, padding)
    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i, j, sl in _offsets(kh, kw, stride, ho, wo):
        out += xp[sl] * wdat[None, :, 0, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def backward_fn(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        for i, j, sl in _offsets(kh, kw, stride, ho, wo):
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gx[sl] += g * wdat[None, :, 0, i, j, None, None]
        grads = [gx[:, :, pt:pt + h, pl:pl + wd], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return apply_op("depthwise_conv2d", out, inputs, backward_fn)


def factorized_conv3x3(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """A 3x1 then a 1x3 same-padded convolution; together they see a 3x3 footprint."""
    if w1.shape[2:] != (3, 1) or w2.shape[2:] != (1, 3):
        raise ShapeError(f"factorized kernels must be 3x1 and 1x3, got {w1.shape} and {w2.shape}")
    return conv2d(conv2d(x, w1, b1), w2, b2)


def separable_conv2d(x: Tensor, depthwise: Tensor, depthwise_bias: Tensor,
                     pointwise: Tensor, pointwise_bias: Tensor) -> Tensor:
    return conv2d(depthwise_conv2d(x, depthwise, depthwise_bias), pointwise, pointwise_bias)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPSILON) -> Tensor:
    """Per-channel normalization.

    In training mode uses batch statistics and updates ``running_mean`` /
    ``running_var`` in place; in eval mode uses the running statistics.
    """
    if x.shape[0] == 0:
        raise ValueError("batch_norm on an empty batch")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm params {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    count = xd.size // c

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * g_
        if training:
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return apply_op("batch_norm", out, (x, gamma, beta), backward_fn)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, group_size: int = 16,
               eps: float = BN_EPSILON) -> Tensor:
    """Per-sample normalization over groups of ``group_size`` channels."""
    n, c = x.shape[:2]
    if c % group_size:
        raise ShapeError(f"group_norm: {c} channels not divisible by group size {group_size}")
    groups = c // group_size
    spatial = x.shape[2:]
    xg = reshape(x, (n, groups, -1))
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    normed = reshape(centered / (var + eps).sqrt(), (n, c) + spatial)
    bshape = (1, c) + (1,) * len(spatial)
    return normed * reshape(gamma, bshape) + reshape(beta, bshape)


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def selu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    ex = np.exp(np.minimum(xd, 0))
    out = SELU_LAMBDA * np.where(pos, xd, SELU_ALPHA * (ex - 1))
    return apply_op("selu", out, (x,),
                    lambda g: (g * SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * ex),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "selu":
        return selu(x)
    raise ValueError(f"unknown activation {kind!r}")


def max_pool(x: Tensor, k: int, stride: Optional[int] = None, padding: str = "valid") -> Tensor:
    """Window max; ties route the gradient to the first maximal position."""
    if k < 1:
        raise ValueError("pool size must be >= 1")
    stride = stride or k
    n, c, h, w = x.shape
    pt, pb, ho = _pads(h, k, stride, padding)
    pl, pr, wo = _pads(w, k, stride, padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    out = np.full((n, c, ho, wo), -np.inf, dtype=xd.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for i, j, sl in _offsets(k, k, stride, ho, wo):
        v = xp[sl]
        better = v > out
        out = np.where(better, v, out)
        arg[better] = i * k + j

    def backward_fn(g):
        gx = np.zeros_like(xp)
        for i, j, sl in _offsets(k, k, stride, ho, wo):
            gx[sl] += g * (arg == i * k + j)
        return (gx[:, :, pt:pt + h, pl:pl + w],)

    return apply_op("max_pool", out, (x,), backward_fn)


def avg_pool(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    if k < 1:
        raise ValueError("pool size must be >= 1")
    stride = stride or k
    n, c, h, w = x.shape
    _, _, ho = _pads(h, k, stride, "valid")
    _, _, wo = _pads(w, k, stride, "valid")
    xd = x.data
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for _, _, sl in _offsets(k, k, stride, ho, wo):
        out += xd[sl]
    out /= k * k

    def backward_fn(g):
        gx = np.zeros_like(xd)
        for _, _, sl in _offsets(k, k, stride, ho, wo):
            gx[sl] += g / (k * k)
        return (gx,)

    return apply_op("avg_pool", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    n, c = x.shape[:2]
    flat = x.data.reshape(n, c, -1)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(shape),)

    return apply_op("global_max_pool", out, (x,), backward_fn)


def dropout(x: Tensor, keep: float = 0.6, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/keep`` during training."""
    if not 0 < keep <= 1:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    if not training or keep == 1:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return apply_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} vs weight {w.shape}")
    return matmul(x, w) + b


def lstm_seq(x_seq: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """LSTM over ``x_seq`` shaped ``[batch, T, features]``; returns ``[batch, T, hidden]``.

    Gate blocks in ``wx``/``wh``/``b`` are ordered input, forget, cell, output.
    The initial hidden and cell states are zero.
    """
    bsz, steps, feats = x_seq.shape
    hidden = wh.shape[0]
    if wx.shape != (feats, 4 * hidden) or wh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ShapeError(f"lstm params {wx.shape}, {wh.shape}, {b.shape} inconsistent with "
                         f"features={feats}, hidden={hidden}")
    xw = reshape(matmul(reshape(x_seq, (bsz * steps, feats)), wx) + b, (bsz, steps, 4 * hidden))
    h = c = None
    outputs = []
    for t in range(steps):
        z = take(xw, (slice(None), t))
        if h is not None:
            z = z + matmul(h, wh)
        i = take(z, (slice(None), slice(0, hidden))).sigmoid()
        f = take(z, (slice(None), slice(hidden, 2 * hidden))).sigmoid()
        cand = take(z, (slice(None), slice(2 * hidden, 3 * hidden))).tanh()
        o = take(z, (slice(None), slice(3 * hidden, 4 * hidden))).sigmoid()
        c = i * cand if c is None else f * c + i * cand
        h = o * c.tanh()
        outputs.append(reshape(h, (bsz, 1, hidden)))
    return concat(outputs, axis=1)


def time_lstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Average a map over mel bins, run an LSTM along time, tile back over mel bins."""
    n, c, h, w = x.shape
    seq = transpose(x.mean(axis=2), (0, 2, 1))
    out = lstm_seq(seq, wx, wh, b)
    hidden = out.shape[2]
    out = reshape(transpose(out, (0, 2, 1)), (n, hidden, 1, w))
    return broadcast_to(out, (n, hidden, h, w))


def se_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze-and-excitation channel recalibration."""
    n, c = x.shape[:2]
    s = global_avg_pool(x)
    e = relu(dense(s, w1, b1))
    e = dense(e, w2, b2).sigmoid()
    return x * reshape(e, (n, c, 1, 1))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``."""
    z = logits.data
    if np.isnan(z).any():
        raise FloatingPointError("NaN in logits")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"target shape {t.shape} does not match logits {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_sm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = np.asarray(-(t * log_sm).sum() / n, dtype=z.dtype)
    sm = np.exp(log_sm)
    return apply_op("softmax_cross_entropy", loss, (logits,),
                    lambda g: (g * (sm * t.sum(axis=1, keepdims=True) - t) / n,))


def smooth_labels(one_hot, eps: float = 0.1, num_classes: Optional[int] = None) -> np.ndarray:
    """``(1 - eps) * one_hot + eps / K``."""
    if not 0 <= eps < 1:
        raise ValueError(f"label smoothing eps must be in [0, 1), got {eps}")
    y = np.asarray(one_hot, dtype=np.float64)
    k = num_classes or y.shape[-1]
    if y.shape[-1] != k:
        raise ShapeError(f"one-hot width {y.shape[-1]} != K={k}")
    return (1.0 - eps) * y + eps / k
