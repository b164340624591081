"""Differentiable dense operations on (N, C, H, W) arrays.

Every op is a forward/backward pair. Forwards are pure; backwards return
the adjoints rather than mutating anything, except ``batch_normalize`` which
updates the running statistics it is handed (train mode only).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

BN_EPS = 1e-5

IntPair = Union[int, Tuple[int, int]]


def _pair(v: IntPair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _check_conv_args(x, w, b, stride, dilation, padding):
    if x.ndim != 4:
        raise ValueError(f"input must be rank 4 (N, C, H, W), got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"weights must be rank 4 (outC, inC, kH, kW), got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"weights in-channel extent {w.shape[1]} != input channel extent {x.shape[1]}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if b is not None and np.shape(b) != (w.shape[0],):
        raise ValueError(f"bias extent {np.shape(b)} != out-channel extent ({w.shape[0]},)")
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be positive, got {stride}, {dilation}")
    ph, pw = _pair(padding)
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be nonnegative, got {padding}")
    oh = conv_output_size(x.shape[2], kh, stride, dilation, ph)
    ow = conv_output_size(x.shape[3], kw, stride, dilation, pw)
    if oh < 1 or ow < 1:
        raise ValueError(f"input {x.shape[2]}x{x.shape[3]} too small for kernel {kh}x{kw} at dilation {dilation}")
    return kh, kw, ph, pw, oh, ow


def _tap_slice(i, j, dilation, stride, oh, ow):
    r0, c0 = i * dilation, j * dilation
    return (
        slice(None), slice(None),
        slice(r0, r0 + stride * (oh - 1) + 1, stride),
        slice(c0, c0 + stride * (ow - 1) + 1, stride),
    )


def conv2d(x, w, b=None, stride=1, dilation=1, padding: IntPair = 0):
    """Zero-padded 2D cross-correlation. ``padding`` may be an int or (ph, pw)."""
    kh, kw, ph, pw, oh, ow = _check_conv_args(x, w, b, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh * kw, oh, ow), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[_tap_slice(i, j, dilation, stride, oh, ow)]
    y = np.einsum("nckhw,ock->nohw", cols, w.reshape(w.shape[0], c, kh * kw), optimize=True)
    if b is not None:
        y = y + np.asarray(b)[None, :, None, None]
    return y


def conv2d_backward(dy, x, w, stride=1, dilation=1, padding: IntPair = 0):
    """Adjoint of :func:`conv2d`. Returns ``(dx, dw, db)``."""
    kh, kw, ph, pw, oh, ow = _check_conv_args(x, w, None, stride, dilation, padding)
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    dxp = np.zeros_like(xp, dtype=np.result_type(dy, x))
    dw = np.empty(w.shape, dtype=np.result_type(dy, x))
    for i in range(kh):
        for j in range(kw):
            sl = _tap_slice(i, j, dilation, stride, oh, ow)
            dw[:, :, i, j] = np.einsum("nohw,nchw->oc", dy, xp[sl], optimize=True)
            dxp[sl] += np.einsum("nohw,oc->nchw", dy, w[:, :, i, j], optimize=True)
    dx = dxp[:, :, ph:ph + h, pw:pw + wd]
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


@dataclass
class NormStatistics:
    """Per-channel running mean and (biased) variance."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "NormStatistics":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "NormStatistics":
        return NormStatistics(self.mean.copy(), self.var.copy())


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    scale: np.ndarray
    train: bool = field(default=True)


def batch_normalize(x, stats: NormStatistics, scale, shift, mode="train", momentum=0.9):
    """Normalize per channel; returns ``(y, cache)``.

    Train mode uses batch statistics and folds them into ``stats`` as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    c = x.shape[1]
    if stats.mean.shape != (c,) or stats.var.shape != (c,):
        raise ValueError(f"statistics have {stats.mean.shape[0]} channels, input has {c}")
    if mode == "train":
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        stats.mean *= momentum
        stats.mean += (1.0 - momentum) * mean
        stats.var *= momentum
        stats.var += (1.0 - momentum) * var
    else:
        if np.any(~(stats.var > 0)):
            raise ValueError("running variance is zero, negative or NaN; statistics are corrupted")
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return y, BNCache(xhat, inv_std, np.asarray(scale), mode == "train")


def batch_normalize_backward(dy, cache: BNCache):
    """Returns ``(dx, dscale, dshift)``."""
    dshift = dy.sum(axis=(0, 2, 3))
    dscale = (dy * cache.xhat).sum(axis=(0, 2, 3))
    dxhat = dy * cache.scale[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if not cache.train:
        return dxhat * inv_std, dscale, dshift
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = inv_std / m * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - cache.xhat * (dxhat * cache.xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dscale, dshift


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    # subgradient 0 at exactly 0
    return dy * (x > 0)


def softmax_cross_entropy(logits, labels, ignore_class=255, loss_scale=1.0):
    """Mean per-pixel softmax loss over non-ignored pixels, times ``loss_scale``.

    ``labels`` has shape (N, H, W). Returns ``(loss, dlogits)``.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} != logits spatial shape {(n, h, w)}")
    valid = labels != ignore_class
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label value {int(labels[bad][0])} outside [0, {c}) and not ignore_class {ignore_class}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    count = int(valid.sum())
    grad = np.zeros_like(logits, dtype=np.result_type(logits, np.float32))
    if count == 0:
        return 0.0, grad
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -picked[valid].sum() / count * loss_scale
    prob = np.exp(logp)
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (prob - onehot) * valid[:, None] * (loss_scale / count)
    return float(loss), grad
