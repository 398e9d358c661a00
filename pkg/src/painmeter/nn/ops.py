"""Differentiable building blocks on plain numpy arrays.

Single-grid helpers (``conv_forward``, ``global_max_pool``, ...) operate on
2-D arrays of shape (rows, cols). The batch-norm, dropout and softmax
functions are shared with the batched model code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from painmeter.nn import kernels
from painmeter.nn.kernels import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class UsageError(ValueError):
    """An operation was called in a state or mode that does not support it."""


@dataclass
class ConvFilter:
    weights: np.ndarray  # (s, t)
    bias: float = 0.0

    @property
    def window(self) -> tuple[int, int]:
        return self.weights.shape


def as_grid(x) -> np.ndarray:
    g = np.asarray(x, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"expected a 2-d grid, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("grid contains non-finite values")
    return g


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def conv_forward(x, filt: ConvFilter) -> np.ndarray:
    """ReLU feature map of one filter swept over every (s, t) window of ``x``."""
    x = as_grid(x)
    w = as_grid(filt.weights)
    s, t = w.shape
    if s > x.shape[0] or t > x.shape[1]:
        raise ShapeError(f"window {(s, t)} larger than input {x.shape}")
    z = kernels.conv2d_forward(x[None, None], w[None, None], np.array([float(filt.bias)]))
    return relu(z[0, 0])


def global_max_pool(f) -> tuple[float, tuple[int, int]]:
    """Maximum of a grid and the first (row-major) position holding it."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.size == 0:
        raise ShapeError("global max pool needs a non-empty 2-d grid")
    k = int(np.argmax(f))
    i, j = divmod(k, f.shape[1])
    return float(f[i, j]), (i, j)


def local_max_pool(f, window: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError("local max pool needs a 2-d grid")
    out, _ = kernels.maxpool2d_forward(f[None, None], tuple(window), tuple(stride))
    return out[0, 0]


def dense_forward(v, weights, bias, activation: str = "none") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != v.shape[-1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense layer {weights.shape} / bias {bias.shape} cannot take input {v.shape}")
    out = v @ weights.T + bias
    if activation == "relu":
        return relu(out)
    if activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return out


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- batch normalization --------------------------------------------------------

def _feature_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_moments(chunks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-feature mean and (biased) variance pooled over a list of sub-batches.

    Two passes, reduced in list order, so the result does not depend on how
    a batch was split beyond rounding.
    """
    count = sum(c.size // c.shape[1] for c in chunks)
    if count == 0:
        raise UsageError("batch normalization needs a non-empty batch in train mode")
    total = sum(c.sum(axis=_feature_axes(c)) for c in chunks)
    mean = total / count
    sq = sum(((c - _bcast(mean, c.ndim)) ** 2).sum(axis=_feature_axes(c)) for c in chunks)
    return mean, sq / count, count


def batchnorm_forward(x, gamma, beta, mode: str = "train", running_mean=None, running_var=None,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Normalize per feature (axis 1) and apply scale/shift.

    Returns ``(out, (running_mean, running_var), cache)``. Running statistics are
    returned updated in train mode and unchanged in infer mode; the inputs are
    never modified.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if mode == "train":
        if x.shape[0] == 0:
            raise UsageError("batch normalization needs a non-empty batch in train mode")
        mean, var, count = batch_moments([x])
        if running_mean is None:
            running_mean = np.zeros_like(mean)
            running_var = np.ones_like(var)
        new_running = (momentum * running_mean + (1 - momentum) * mean,
                       momentum * running_var + (1 - momentum) * var)
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise UsageError("infer-mode batch normalization needs running statistics")
        mean, var, count = running_mean, running_var, None
        new_running = (running_mean, running_var)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bcast(mean, x.ndim)) * _bcast(inv, x.ndim)
    out = xhat * _bcast(gamma, x.ndim) + _bcast(beta, x.ndim)
    cache = {"xhat": xhat, "inv": inv, "gamma": gamma, "count": count, "mode": mode}
    return out, new_running, cache


def batchnorm_backward(dout, cache):
    """Return ``(dx, dgamma, dbeta)`` for :func:`batchnorm_forward`."""
    dx, dgamma, dbeta = batchnorm_backward_chunks([np.asarray(dout, dtype=np.float64)], [cache["xhat"]],
                                                  cache["gamma"], cache["inv"], cache["count"], cache["mode"])
    return dx[0], dgamma, dbeta


def batchnorm_backward_chunks(douts, xhats, gamma, inv, count, mode):
    nd = douts[0].ndim
    dgamma = sum((d * xh).sum(axis=_feature_axes(d)) for d, xh in zip(douts, xhats))
    dbeta = sum(d.sum(axis=_feature_axes(d)) for d in douts)
    g = _bcast(gamma * inv, nd)
    if mode == "infer":
        return [d * g for d in douts], dgamma, dbeta
    mb = _bcast(dbeta / count, nd)
    mg = _bcast(dgamma / count, nd)
    return [g * (d - mb - xh * mg) for d, xh in zip(douts, xhats)], dgamma, dbeta


# -- dropout -------------------------------------------------------------------------

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(v, rate: float, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return v.copy()
    if mode != "train":
        raise UsageError(f"unknown mode {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout needs a random generator")
    return v * dropout_mask(v.shape, rate, rng)
