"""Comparison models: a dense MLP and spectral/correlation logistic regression."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from painmeter.nn.model import ModelParams, init_params, mlp_architecture
from painmeter.nn.ops import UsageError
from painmeter.signal_store import DataError

DEFAULT_BINS = 64
STD_FLOOR = 1e-12


# -- spectral features ---------------------------------------------------------------

def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT along the last axis (length a power of two)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n & (n - 1):
        raise UsageError(f"radix-2 transform needs a power-of-two length, got {n}")
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    a = x[..., rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(*a.shape[:-1], n // size, size)
        even = a[..., :half].copy()
        odd = a[..., half:] * tw
        a[..., :half] = even + odd
        a[..., half:] = even - odd
        a = a.reshape(*a.shape[:-2], n)
        size *= 2
    return a


def fft_magnitudes(signal, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Magnitudes of DFT bins ``1..bins`` after zero-padding to a power of two.

    Works on the last axis, so a ``(N, L)`` slice gives ``(N, bins)``.
    """
    signal = np.asarray(signal, dtype=np.float64)
    L = signal.shape[-1]
    if bins < 1 or bins >= L / 2:
        raise UsageError(f"need 1 <= bins < L/2, got bins={bins}, L={L}")
    n = _next_pow2(L)
    padded = np.zeros(signal.shape[:-1] + (n,))
    padded[..., :L] = signal
    return np.abs(fft_radix2(padded)[..., 1:bins + 1])


def pearson_pairs(slice_values, return_flags: bool = False):
    """Pearson r for every channel pair ``i < j`` of an ``(N, L)`` slice, row-major upper triangle.

    Pairs involving a constant channel are set to 0 and flagged.
    """
    x = np.asarray(slice_values, dtype=np.float64)
    c = x - x.mean(axis=-1, keepdims=True)
    ss = np.sqrt((c * c).sum(axis=-1))
    degenerate = ss <= STD_FLOOR
    safe = np.where(degenerate, 1.0, ss)
    z = c / safe[..., None]
    r = np.clip(z @ np.swapaxes(z, -1, -2), -1.0, 1.0)
    iu = np.triu_indices(x.shape[-2], k=1)
    out = r[..., iu[0], iu[1]]
    flags = degenerate[..., iu[0]] | degenerate[..., iu[1]]
    out = np.where(flags, 0.0, out)
    return (out, flags) if return_flags else out


def feature_vector(slice_values, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Per-channel FFT magnitudes (channel-major) followed by pairwise correlations."""
    x = np.asarray(slice_values, dtype=np.float64)
    return np.concatenate([fft_magnitudes(x, bins).reshape(*x.shape[:-2], -1), pearson_pairs(x)], axis=-1)


def feature_matrix(x: np.ndarray, bins: int = DEFAULT_BINS, block: int = 256) -> np.ndarray:
    """Feature rows for a stack of slices ``(M, N, L)``."""
    rows = [feature_vector(x[i:i + block], bins) for i in range(0, x.shape[0], block)]
    return np.concatenate(rows, axis=0)


def feature_length(n_channels: int, bins: int = DEFAULT_BINS) -> int:
    return n_channels * bins + n_channels * (n_channels - 1) // 2


def export_features(path, features: np.ndarray, labels=None) -> None:
    """Write one comma-separated row per slice (label first when given)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(np.asarray(features)):
            vals = ",".join(repr(float(v)) for v in row)
            fh.write(f"{int(labels[i])},{vals}\n" if labels is not None else vals + "\n")


# -- logistic regression -------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, f: np.ndarray) -> "Standardizer":
        return cls(f.mean(axis=0), np.maximum(f.std(axis=0), 1e-8))

    def apply(self, f: np.ndarray) -> np.ndarray:
        return (f - self.mean) / self.std


@dataclass
class LogisticParams:
    """``weights`` is (C, D) with intercepts (C,); the binary form keeps one row."""

    weights: np.ndarray
    intercepts: np.ndarray
    binary: bool = False
    iterations: int = 0
    grad_norm: float = float("nan")

    def proba(self, f: np.ndarray) -> np.ndarray:
        f = np.atleast_2d(f)
        if self.binary:
            s = f @ self.weights[0] + self.intercepts[0]
            p1 = 1.0 / (1.0 + np.exp(-s))
            return np.stack([1.0 - p1, p1], axis=1)
        z = f @ self.weights.T + self.intercepts
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, f: np.ndarray) -> np.ndarray:
        return self.proba(f).argmax(axis=1)


def _multinomial_objective(W, b, f, Y, l2):
    z = f @ W.T + b
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = f.shape[0]
    loss = -(Y * logp).sum() / n + 0.5 * l2 * (W * W).sum()
    d = (np.exp(logp) - Y) / n
    return loss, d.T @ f + l2 * W, d.sum(axis=0)


def _binary_objective(W, b, f, Y, l2):
    # Y is the indicator of category 1; W is (1, D)
    s = f @ W[0] + b[0]
    y = Y[:, 1]
    # log(1 + e^s) - y s, computed stably
    n = f.shape[0]
    loss = (np.logaddexp(0.0, s) - y * s).sum() / n + 0.5 * l2 * (W * W).sum()
    d = (1.0 / (1.0 + np.exp(-s)) - y) / n
    return loss, (d @ f + l2 * W[0])[None], np.array([d.sum()])


def logistic_train(features, labels, n_classes: int, l2: float = 1e-2, tol: float = 1e-6,
                   max_iter: int = 5000, binary: bool = False) -> LogisticParams:
    """Penalized maximum likelihood by accelerated gradient descent with backtracking.

    The objective is mean negative log-likelihood plus ``l2/2 * ||W||^2``
    (intercepts unpenalized). ``binary=True`` fits the single-logit sigmoid
    form; with penalty ``l2/2`` it has the same optimum as the two-row
    multinomial form with penalty ``l2``.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if f.ndim != 2 or f.shape[0] == 0 or f.shape[0] != y.shape[0]:
        raise UsageError("need a non-empty (M, D) feature matrix with one label per row")
    if not np.all(np.isfinite(f)):
        raise DataError("non-finite feature values")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise UsageError("label outside the category range")
    if binary and n_classes != 2:
        raise UsageError("binary logistic regression needs exactly two categories")
    Y = np.eye(n_classes)[y]
    rows = 1 if binary else n_classes
    objective = _binary_objective if binary else _multinomial_objective
    W = np.zeros((rows, f.shape[1]))
    b = np.zeros(rows)
    Wm, bm = W.copy(), b.copy()  # extrapolated point
    t = 1.0
    step = 1.0
    gnorm = np.inf
    it = 0
    # Step acceptance and momentum restart use gradients only: near the optimum,
    # loss decreases drop below roundoff long before the gradient reaches tol.
    _, gW, gb = objective(Wm, bm, f, Y, l2)
    for it in range(1, max_iter + 1):
        gnorm = float(np.sqrt((gW * gW).sum() + (gb * gb).sum()))
        if gnorm < tol:
            W, b = Wm, bm
            break
        while True:
            W_new, b_new = Wm - step * gW, bm - step * gb
            _, gW_new, gb_new = objective(W_new, b_new, f, Y, l2)
            # local Lipschitz test: ||g(x - step g) - g(x)|| <= ||g||  means step <= 1/L
            dg = np.sqrt(((gW_new - gW) ** 2).sum() + ((gb_new - gb) ** 2).sum())
            if dg <= gnorm or step < 1e-12:
                break
            step *= 0.5
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        mom = (t - 1) / t_new
        # restart when the step direction opposes the previous move
        if ((gW * (W_new - W)).sum() + (gb * (b_new - b)).sum()) > 0:
            t_new, mom = 1.0, 0.0
        Wm = W_new + mom * (W_new - W)
        bm = b_new + mom * (b_new - b)
        W, b, t = W_new, b_new, t_new
        if mom == 0.0:
            gW, gb = gW_new, gb_new
        else:
            _, gW, gb = objective(Wm, bm, f, Y, l2)
        step *= 1.25
    return LogisticParams(W, b, binary, it, gnorm)


@dataclass
class LogisticModel:
    """Standardizer plus fitted coefficients; predicts from raw slices."""

    standardizer: Standardizer
    params: LogisticParams
    bins: int = DEFAULT_BINS
    l2: float = 1e-2

    def proba_slices(self, x: np.ndarray) -> np.ndarray:
        return self.params.proba(self.standardizer.apply(feature_matrix(x, self.bins)))

    def predict_slices(self, x: np.ndarray) -> np.ndarray:
        return self.proba_slices(x).argmax(axis=1)


L2_GRID = (1e-3, 1e-2, 1e-1, 1.0)


def fit_logistic_baseline(train_x, train_y, n_classes: int, val_x=None, val_y=None, bins: int = DEFAULT_BINS,
                          l2_grid=L2_GRID, max_iter: int = 2000) -> LogisticModel:
    """Standardize training features and fit; when validation slices are given the
    penalty is chosen from ``l2_grid`` by validation accuracy (first best wins)."""
    ftr = feature_matrix(train_x, bins)
    st = Standardizer.fit(ftr)
    ftr = st.apply(ftr)
    grid = list(l2_grid) if val_x is not None else [l2_grid[len(l2_grid) // 2]]
    fval = st.apply(feature_matrix(val_x, bins)) if val_x is not None else None
    best, best_acc = None, -1.0
    for l2 in grid:
        params = logistic_train(ftr, train_y, n_classes, l2=l2, max_iter=max_iter)
        acc = float(np.mean(params.predict(fval) == val_y)) if fval is not None else 0.0
        if acc > best_acc:
            best, best_acc = LogisticModel(st, params, bins, l2), acc
    return best


# -- MLP -----------------------------------------------------------------------------

def mlp_build(n_channels: int, seq_len: int, n_classes: int, hidden=(256, 128, 64), dropout: float = 0.5,
              seed: int = 0) -> ModelParams:
    """Four dense layers (three ReLU hidden layers and a softmax output) over the flattened slice."""
    if n_channels < 1 or seq_len < 1:
        raise UsageError("input length must be >= 1")
    arch = mlp_architecture(n_channels, seq_len, n_classes, hidden, dropout)
    return init_params(arch, np.random.default_rng(seed))


def save_logistic(model: LogisticModel, path) -> None:
    np.savez(Path(path), mean=model.standardizer.mean, std=model.standardizer.std,
             weights=model.params.weights, intercepts=model.params.intercepts,
             binary=np.array(model.params.binary), bins=np.array(model.bins), l2=np.array(model.l2))
