"""Convolution and pooling kernels with a compiled fast path.

The compiled extension ``painmeter.nn._ckernels`` is used when it imports
and ``PAINMETER_PURE`` is not set; otherwise the numpy implementations in
this module run. Both produce the same values up to floating-point
summation order.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    if os.environ.get("PAINMETER_PURE") == "1":
        raise ImportError("pure-python kernels requested")
    from painmeter.nn import _ckernels
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "numpy"


class ShapeError(ValueError):
    """Array shapes are incompatible with the requested operation."""


def _check_conv(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-d input and filters, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"filters expect {w.shape[1]} input maps, got {x.shape[1]}")
    if w.shape[2] > x.shape[2] or w.shape[3] > x.shape[3]:
        raise ShapeError(f"window {w.shape[2:]} larger than input {x.shape[2:]}")


# -- numpy reference kernels -------------------------------------------------

def conv2d_forward_numpy(x, w, b):
    _check_conv(x, w)
    co, _, s, t = w.shape
    out = np.empty((x.shape[0], co, x.shape[2] - s + 1, x.shape[3] - t + 1))
    for n in range(x.shape[0]):
        win = sliding_window_view(x[n], (s, t), axis=(1, 2))  # (Ci, Ho, Wo, s, t)
        out[n] = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    out += b[None, :, None, None]
    return out


def conv2d_backward_weight_numpy(x, dy, s, t):
    dw = np.zeros((dy.shape[1], x.shape[1], s, t))
    for n in range(x.shape[0]):
        win = sliding_window_view(x[n], (s, t), axis=(1, 2))
        dw += np.tensordot(dy[n], win, axes=([1, 2], [1, 2]))
    return dw


# -- dispatch ------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Valid cross-correlation ``y[n,o,i,j] = b[o] + sum w[o,c,a,k] x[n,c,i+a,j+k]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    _check_conv(x, w)
    if _use_compiled(backend):
        return _ckernels.conv2d_forward(x, w, b)
    return conv2d_forward_numpy(x, w, b)


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, need_input_grad: bool = True,
                    backend: str | None = None):
    """Return ``(dx, dw, db)`` for :func:`conv2d_forward`; ``dx`` is None when not needed."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    _, _, s, t = w.shape
    if _use_compiled(backend):
        dw = _ckernels.conv2d_backward_weight(x, dy, s, t)
    else:
        dw = conv2d_backward_weight_numpy(x, dy, s, t)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        # full correlation of dy with the flipped, transposed filter bank
        padded = np.pad(dy, ((0, 0), (0, 0), (s - 1, s - 1), (t - 1, t - 1)))
        wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv2d_forward(padded, wflip, np.zeros(wflip.shape[0]), backend=backend)
    return dx, dw, db


def _use_compiled(backend: str | None) -> bool:
    if backend is None:
        return _ckernels is not None
    if backend == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return True
    if backend == "numpy":
        return False
    raise ValueError(f"unknown backend {backend!r}")


# -- pooling ---------------------------------------------------------------------

def maxpool2d_forward(x: np.ndarray, window: tuple[int, int], stride: tuple[int, int]):
    """Max pooling over the last two axes of a (B, C, H, W) array.

    Returns the pooled array and the flat (H*W) index of each selected input
    element. Ties resolve to the first element in row-major window order.
    """
    ph, pw = window
    sh, sw = stride
    B, C, H, W = x.shape
    if ph > H or pw > W:
        raise ShapeError(f"pool window {window} exceeds input {(H, W)}")
    if ph < 1 or pw < 1 or sh < 1 or sw < 1:
        raise ShapeError("pool window and stride must be positive")
    Ho = (H - ph) // sh + 1
    Wo = (W - pw) // sw + 1
    win = sliding_window_view(x, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, ph * pw)
    k = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * sh + k // pw
    cols = np.arange(Wo)[None, :] * sw + k % pw
    return out, rows * W + cols


def maxpool2d_backward(dy: np.ndarray, argmax: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    B, C, H, W = in_shape
    dx = np.zeros((B * C, H * W))
    idx = argmax.reshape(B * C, -1)
    g = dy.reshape(B * C, -1)
    # windows may overlap when stride < window, so accumulate
    offsets = (np.arange(B * C) * (H * W))[:, None]
    np.add.at(dx.reshape(-1), (idx + offsets).ravel(), g.ravel())
    return dx.reshape(B, C, H, W)


def global_maxpool_forward(x: np.ndarray):
    """Per-map maximum of a (B, C, H, W) array plus its flat argmax."""
    B, C, H, W = x.shape
    if H * W == 0:
        raise ShapeError("cannot pool an empty feature map")
    flat = x.reshape(B, C, H * W)
    k = flat.argmax(axis=-1)
    return np.take_along_axis(flat, k[..., None], axis=-1)[..., 0], k


def global_maxpool_backward(dm: np.ndarray, argmax: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    B, C, H, W = in_shape
    dx = np.zeros((B, C, H * W))
    np.put_along_axis(dx, argmax[..., None], dm[..., None], axis=-1)
    return dx.reshape(in_shape)


# -- fused batch-norm / ReLU / max pooling ---------------------------------------------
# Pooled maps are handled as (B, C, M) with M pooled cells per map (M = 1 for
# global pooling); ``idx`` stores the flat H*W input position behind each cell.
# Pool windows are non-overlapping (stride equals window).

def _contig(*arrays):
    return [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]


def channel_sums(z: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Per-channel sum of a (B, C, H, W) array."""
    (z,) = _contig(z)
    if _use_compiled(backend):
        return _ckernels.channel_sums(z)
    return z.sum(axis=(0, 2, 3))


def channel_sqdev(z: np.ndarray, mean: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Per-channel sum of squared deviations from ``mean``."""
    z, mean = _contig(z, mean)
    if _use_compiled(backend):
        return _ckernels.channel_sqdev(z, mean)
    return ((z - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))


def bn_relu_pool_forward(z, mu, inv, gamma, beta, window=None, backend: str | None = None):
    """``maxpool(relu((z - mu) * inv * gamma + beta))`` over ``window`` (None pools whole maps).

    Returns ``(out, idx)``; ``out`` is (B, C, Ho, Wo), or (B, C) for whole-map
    pooling, and ``idx`` is (B, C, M). Ties go to the first position in
    row-major window order.
    """
    z, mu, inv, gamma, beta = _contig(z, mu, inv, gamma, beta)
    B, C, H, W = z.shape
    if window is not None and (window[0] > H or window[1] > W or min(window) < 1):
        raise ShapeError(f"pool window {window} does not fit input {(H, W)}")
    if _use_compiled(backend):
        ph, pw = (0, 0) if window is None else window
        out, idx = _ckernels.bn_relu_pool(z, mu, inv, gamma, beta, ph, pw)
    else:
        u = (z - mu[None, :, None, None]) * inv[None, :, None, None] * gamma[None, :, None, None] \
            + beta[None, :, None, None]
        a = np.where(u > 0, u, 0.0)
        if window is None:
            out, idx = global_maxpool_forward(a)
            out, idx = out[..., None], idx[..., None]
        else:
            out, idx = maxpool2d_forward(a, window, window)
            out, idx = out.reshape(B, C, -1), idx.reshape(B, C, -1)
    if window is None:
        return out[..., 0], idx
    return out.reshape(B, C, H // window[0], W // window[1]), idx


def bn_relu_pool_stats(dout, idx, z, mu, inv, gamma, beta, backend: str | None = None):
    """Gated pooled-cell gradients ``du`` (B, C, M) and the per-channel sums
    ``s1 = sum du`` and ``s2 = sum du * xhat`` that batch-norm backward needs."""
    B, C = z.shape[:2]
    dout = np.ascontiguousarray(np.asarray(dout, dtype=np.float64).reshape(B, C, -1))
    z, mu, inv, gamma, beta = _contig(z, mu, inv, gamma, beta)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if _use_compiled(backend):
        return _ckernels.pool_grad_stats(dout, idx, z, mu, inv, gamma, beta)
    zi = np.take_along_axis(z.reshape(B, C, -1), idx, axis=-1)
    xh = (zi - mu[None, :, None]) * inv[None, :, None]
    u = xh * gamma[None, :, None] + beta[None, :, None]
    du = np.where(u > 0, dout, 0.0)
    return du, du.sum(axis=(0, 2)), (du * xh).sum(axis=(0, 2))


def bn_relu_pool_input_grad(du, idx, z, mu, inv, gamma, s1, s2, count, train: bool,
                            backend: str | None = None) -> np.ndarray:
    """Gradient w.r.t. the pre-normalization map ``z``.

    In train mode ``s1``/``s2`` must be the sums over the whole batch and
    ``count`` the number of elements per channel in that batch.
    """
    du, z, mu, inv, gamma, s1, s2 = _contig(du, z, mu, inv, gamma, s1, s2)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if _use_compiled(backend):
        return _ckernels.bn_input_grad(du, idx, z, mu, inv, gamma, s1, s2, float(count or 1), bool(train))
    B, C, H, W = z.shape
    g = (gamma * inv)[None, :, None]
    if train:
        xhat = (z.reshape(B, C, -1) - mu[None, :, None]) * inv[None, :, None]
        dz = -g * ((s1 / count)[None, :, None] + xhat * (s2 / count)[None, :, None])
    else:
        dz = np.zeros((B, C, H * W))
    cur = np.take_along_axis(dz, idx, axis=-1)
    np.put_along_axis(dz, idx, cur + g * du, axis=-1)
    return dz.reshape(B, C, H, W)
