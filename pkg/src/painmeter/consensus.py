"""Plurality voting over randomly placed slices of a longer unit."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from painmeter.data import LengthError, MinuteSample, slice_len
from painmeter.nn.model import ModelParams, predict_proba
from painmeter.nn.ops import UsageError
from painmeter.signal_store import Recording

DEFAULT_K = 100


@dataclass(frozen=True)
class VoteTally:
    counts: tuple[int, ...]
    total: int

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ValueError("vote counts must be non-negative")
        if sum(self.counts) != self.total:
            raise ValueError("vote counts must sum to the total")

    @classmethod
    def from_predictions(cls, predictions, n_classes: int) -> "VoteTally":
        preds = np.asarray(predictions, dtype=np.int64)
        if preds.size and (preds.min() < 0 or preds.max() >= n_classes):
            raise UsageError("prediction outside the category range")
        counts = np.bincount(preds, minlength=n_classes)
        return cls(tuple(int(c) for c in counts), int(preds.size))

    @property
    def winner(self) -> int:
        return plurality(self.counts)

    def fractions(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64) / self.total


def plurality(counts) -> int:
    """Index with the most votes; ties go to the lowest index."""
    counts = np.asarray(counts)
    if counts.size == 0:
        raise UsageError("no categories to vote over")
    return int(np.argmax(counts))  # argmax returns the first maximal index


def _values(unit) -> np.ndarray:
    if isinstance(unit, (MinuteSample, Recording)):
        return unit.values
    raise UsageError(f"cannot take slices from {type(unit).__name__}")


def _period(unit) -> float:
    return unit.sample_period_ms


def slice_classifier(model):
    """Map a model to ``f(x: (M, N, L)) -> predicted indices``.

    Accepts network parameters, anything with ``predict_slices`` (the
    logistic baseline) or a plain callable.
    """
    if isinstance(model, ModelParams):
        return lambda x: predict_proba(model, x).argmax(axis=1)
    if hasattr(model, "predict_slices"):
        return model.predict_slices
    if callable(model):
        return model
    raise UsageError(f"cannot classify slices with {type(model).__name__}")


def draw_offsets(unit, k: int, seed, seq_length_s: float = 15.0) -> np.ndarray:
    """``k`` uniform start offsets (with replacement); the first ``j`` offsets do not depend on ``k``."""
    if k < 1:
        raise UsageError("consensus needs k >= 1 slices")
    values = _values(unit)
    L = slice_len(seq_length_s, _period(unit))
    total = values.shape[1]
    if L > total:
        raise LengthError(f"slice of {L} timesteps does not fit in a unit of {total}")
    return np.random.default_rng(seed).integers(0, total - L + 1, size=k)


def classify_offsets(model, unit, offsets, seq_length_s: float = 15.0, block: int = 64,
                     executor=None) -> np.ndarray:
    """Predicted index for each slice; blocks may run on ``executor``, results keep offset order."""
    values = _values(unit)
    L = slice_len(seq_length_s, _period(unit))
    classify = slice_classifier(model)
    offsets = np.asarray(offsets)

    def run(start):
        part = offsets[start:start + block]
        return classify(np.stack([values[:, o:o + L] for o in part]))

    starts = range(0, len(offsets), block)
    parts = list(executor.map(run, starts)) if executor is not None else [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def consensus_predict(model, unit, k: int = DEFAULT_K, seed=0, n_classes: int | None = None,
                      seq_length_s: float = 15.0, executor=None) -> tuple[int, VoteTally]:
    """Classify ``k`` random-offset slices of ``unit`` and return the plurality index and tally."""
    if n_classes is None:
        if not isinstance(model, ModelParams):
            raise UsageError("n_classes is required for non-network models")
        n_classes = model.arch.n_classes
    offsets = draw_offsets(unit, k, seed, seq_length_s)
    preds = classify_offsets(model, unit, offsets, seq_length_s, executor=executor)
    tally = VoteTally.from_predictions(preds, n_classes)
    return tally.winner, tally


def unit_seed(base_seed: int, index: int) -> list[int]:
    return [int(base_seed), int(index)]


def consensus_curve(model, units, labels, k_values, seed: int = 0, n_classes: int | None = None,
                    seq_length_s: float = 15.0, executor=None):
    """Consensus accuracy for each ``k`` over ``units`` (with true category indices ``labels``).

    Unit ``i`` uses seed ``[seed, i]``; the largest ``k`` is classified once
    and smaller ``k`` use its prefix, which equals an independent
    :func:`consensus_predict` call with the same seed. Returns
    ``(rows, tallies)`` with rows ``(k, accuracy)`` and the tallies at each k.
    """
    ks = list(k_values)
    if not units:
        raise UsageError("consensus curve needs at least one unit")
    if ks != sorted(ks) or ks[0] < 1:
        raise UsageError("k values must be ascending and >= 1")
    if n_classes is None:
        if not isinstance(model, ModelParams):
            raise UsageError("n_classes is required for non-network models")
        n_classes = model.arch.n_classes
    kmax = ks[-1]
    all_preds = []
    for i, unit in enumerate(units):
        offs = draw_offsets(unit, kmax, unit_seed(seed, i), seq_length_s)
        all_preds.append(classify_offsets(model, unit, offs, seq_length_s, executor=executor))
    rows, tallies = [], {}
    labels = list(labels)
    for k in ks:
        ts = [VoteTally.from_predictions(p[:k], n_classes) for p in all_preds]
        acc = float(np.mean([t.winner == y for t, y in zip(ts, labels)]))
        rows.append((k, acc))
        tallies[k] = ts
    return rows, tallies


def write_curve(rows, path, header=("k", "accuracy")) -> None:
    lines = [",".join(header)] + [f"{k},{acc!r}" for k, acc in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_curve(path) -> list[tuple[int, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [(int(a), float(b)) for a, b in (ln.split(",") for ln in lines if ln)]
