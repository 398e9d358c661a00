"""Distance-weighted cross-entropy for ordered categories.

For a probability vector ``p`` over ``C`` ordered categories and true index
``y`` the per-example loss is::

    (1 + |argmax(p) - y| / (C - 1)) * (1 / C) * (-log p[y])

The distance weight is piecewise constant in the logits, so the gradient
treats it as a constant: ``d loss / d logits = weight / C * (p - onehot(y))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from painmeter.nn.ops import UsageError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class OrdinalTarget:
    true_index: int
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise UsageError("ordinal loss needs at least two categories")
        if not 0 <= self.true_index < self.n_classes:
            raise ValueError(f"true index {self.true_index} outside [0, {self.n_classes - 1}]")

    @property
    def onehot(self) -> np.ndarray:
        y = np.zeros(self.n_classes)
        y[self.true_index] = 1.0
        return y


def _check(p: np.ndarray, targets: np.ndarray) -> int:
    if p.ndim != 2 or p.shape[0] != targets.shape[0]:
        raise ValueError(f"probabilities {p.shape} do not match {targets.shape[0]} targets")
    C = p.shape[1]
    if C < 2:
        raise UsageError("ordinal loss needs at least two categories")
    if np.any(targets < 0) or np.any(targets >= C):
        raise ValueError("target index out of range")
    return C


def distance_weights(p, targets) -> np.ndarray:
    """``1 + |argmax(p) - y| / (C - 1)`` per row; always in [1, 2]."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    C = _check(p, targets)
    return 1.0 + np.abs(p.argmax(axis=1) - targets) / (C - 1)


def ordinal_losses(p, targets) -> np.ndarray:
    """Per-example losses for a batch of probability rows and integer targets."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    C = _check(p, targets)
    w = distance_weights(p, targets)
    p_true = np.maximum(p[np.arange(len(targets)), targets], PROB_FLOOR)
    return w / C * -np.log(p_true)


def ordinal_loss(p, target: OrdinalTarget) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (target.n_classes,):
        raise ValueError(f"expected {target.n_classes} probabilities, got shape {p.shape}")
    return float(ordinal_losses(p[None], [target.true_index])[0])


def ordinal_loss_gradient(p, target: OrdinalTarget) -> np.ndarray:
    """Gradient with respect to the pre-softmax logits, distance weight held fixed."""
    p = np.asarray(p, dtype=np.float64)
    return logit_gradients(p[None], np.array([target.true_index]))[0]


def logit_gradients(p, targets, scale: float = 1.0) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    C = _check(p, targets)
    w = distance_weights(p, targets)
    g = p.copy()
    g[np.arange(len(targets)), targets] -= 1.0
    return g * (w * scale / C)[:, None]


def batch_ordinal_loss(batch) -> float:
    """Mean loss over an iterable of ``(p, OrdinalTarget)`` pairs."""
    pairs = list(batch)
    if not pairs:
        raise UsageError("batch ordinal loss needs a non-empty batch")
    return float(np.mean([ordinal_loss(p, t) for p, t in pairs]))


def mean_loss_and_grad(p: np.ndarray, targets: np.ndarray, batch_size: int | None = None):
    """Mean loss over the rows of ``p`` and logit gradients scaled for that mean.

    ``batch_size`` sets the divisor when ``p`` is one sub-batch of a larger batch.
    """
    n = batch_size if batch_size is not None else len(targets)
    if n == 0:
        raise UsageError("batch ordinal loss needs a non-empty batch")
    losses = ordinal_losses(p, targets)
    return float(losses.sum() / n), logit_gradients(p, targets, 1.0 / n)
