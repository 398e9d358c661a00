"""Confusion matrices, absolute-error histograms and expected-score fit."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from painmeter.nn.ops import UsageError


def _check(preds, truths, n_classes: int):
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise UsageError("predictions and truths must be equal-length lists")
    for arr in (p, t):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise UsageError(f"label outside [0, {n_classes - 1}]")
    return p, t


def confusion(preds, truths, n_classes: int) -> np.ndarray:
    """C x C counts; rows are true categories, columns predicted."""
    p, t = _check(preds, truths, n_classes)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def accuracy_from_confusion(m: np.ndarray) -> float:
    total = m.sum()
    return float(np.trace(m) / total) if total else float("nan")


def ape_histogram(preds, truths, n_classes: int) -> np.ndarray:
    """Counts of ``|pred - truth|`` for distances 0..C-1."""
    p, t = _check(preds, truths, n_classes)
    return np.bincount(np.abs(p - t), minlength=n_classes)


def ape_from_confusion(m: np.ndarray) -> np.ndarray:
    C = m.shape[0]
    i, j = np.indices(m.shape)
    return np.bincount(np.abs(i - j).ravel(), weights=m.ravel(), minlength=C).astype(np.int64)


def expected_scores(probs, category_values) -> np.ndarray:
    """``sum_c value[c] * p[c]`` per row, rounded to one decimal."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    vals = np.asarray(category_values, dtype=np.float64)
    if probs.shape[1] != vals.size:
        raise UsageError("probability vectors do not match the category values")
    return np.round(probs @ vals, 1)


def r_squared(predicted, actual) -> float:
    """``1 - SS_res / SS_tot``; NaN when the actual values have no variance."""
    y = np.asarray(actual, dtype=np.float64)
    f = np.asarray(predicted, dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(((y - f) ** 2).sum()) / ss_tot


def expected_score_r2(probs, truths, category_values):
    """Returns ``(pairs, r2)``; pairs are (expected score, true score). ``r2`` is NaN
    (undefined) when all true scores are equal."""
    e = expected_scores(probs, category_values)
    t = np.asarray(truths, dtype=np.float64)
    if e.shape[0] != t.shape[0]:
        raise UsageError("one true score per probability vector is required")
    return list(zip(e.tolist(), t.tolist())), r_squared(e, t)


@dataclass
class MetricsReport:
    category_values: list[int]
    slice_accuracy: float
    confusion: np.ndarray
    ape: np.ndarray
    consensus_accuracy: float | None = None
    consensus_confusion: np.ndarray | None = None
    expected_pairs: list[tuple[float, float]] = field(default_factory=list)
    r2: float | None = None

    @property
    def misclassified_within_one(self) -> float:
        """Share of wrong slice predictions that are one category off."""
        wrong = self.ape[1:].sum()
        return float(self.ape[1] / wrong) if wrong else 1.0

    def to_text(self) -> str:
        C = len(self.category_values)
        out = [f"slice_accuracy={self.slice_accuracy!r}"]
        if self.consensus_accuracy is not None:
            out.append(f"consensus_accuracy={self.consensus_accuracy!r}")
        if self.r2 is not None:
            out.append(f"expected_score_r2={self.r2!r}")
        out.append(f"misclassified_within_one={self.misclassified_within_one!r}")
        out.append("# confusion (rows true, columns predicted): " + ",".join(map(str, self.category_values)))
        out += [",".join(str(int(v)) for v in row) for row in self.confusion]
        out.append("# absolute error histogram: distance,count")
        out += [f"{d},{int(self.ape[d])}" for d in range(C)]
        if self.expected_pairs:
            out.append("# expected_score,true_score")
            out += [f"{e},{t}" for e, t in self.expected_pairs]
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def build_report(category_values, slice_preds, slice_truths, consensus_preds=None, consensus_truths=None,
                 consensus_fractions=None) -> MetricsReport:
    """Assemble a report; expected scores use the consensus vote fractions when given."""
    C = len(category_values)
    m = confusion(slice_preds, slice_truths, C)
    rep = MetricsReport(list(category_values), accuracy_from_confusion(m), m, ape_from_confusion(m))
    if consensus_preds is not None:
        cm = confusion(consensus_preds, consensus_truths, C)
        rep.consensus_accuracy = accuracy_from_confusion(cm)
        rep.consensus_confusion = cm
        if consensus_fractions is not None:
            true_scores = [category_values[t] for t in consensus_truths]
            rep.expected_pairs, rep.r2 = expected_score_r2(consensus_fractions, true_scores, category_values)
    return rep
