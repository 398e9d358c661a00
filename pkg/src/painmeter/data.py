"""Minute samples, slices, per-channel normalization and fold plans."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from painmeter.nn.ops import UsageError
from painmeter.signal_store import Recording

MINUTES_PER_RECORDING = 10
STD_FLOOR = 1e-8
FIVEFOLD = "fivefold_within_recording"
LORO = "leave_one_recording_out"
PROTOCOL_ALIASES = {"fivefold": FIVEFOLD, FIVEFOLD: FIVEFOLD, "loro": LORO, LORO: LORO}


class LengthError(ValueError):
    """A recording or sample is too short for the requested division."""


def samples_per_minute(period_ms: float) -> int:
    return int(round(60000.0 / period_ms))


def slice_len(seq_length_s: float, period_ms: float) -> int:
    return int(round(seq_length_s * 1000.0 / period_ms))


@dataclass(frozen=True)
class MinuteSample:
    recording_id: str
    index: int
    values: np.ndarray  # (N, samples_per_minute)
    label: int  # pain score
    subject_id: str = ""
    sample_period_ms: float = 15.0

    @property
    def key(self) -> str:
        return f"{self.recording_id}/{self.index}"


@dataclass(frozen=True)
class SliceTensor:
    values: np.ndarray  # (N, Ls)
    sample_key: str
    offset: int
    label: int


def split_minutes(rec: Recording) -> list[MinuteSample]:
    """Ten contiguous one-minute samples; timesteps beyond ten minutes are dropped."""
    per_min = samples_per_minute(rec.sample_period_ms)
    need = per_min * MINUTES_PER_RECORDING
    if rec.n_timesteps < need:
        raise LengthError(f"recording {rec.id} has {rec.n_timesteps} timesteps, "
                          f"{need - rec.n_timesteps} short of {MINUTES_PER_RECORDING} minutes")
    return [MinuteSample(rec.id, i, rec.values[:, i * per_min:(i + 1) * per_min], rec.pain_score,
                         rec.subject_id, rec.sample_period_ms)
            for i in range(MINUTES_PER_RECORDING)]


def slice_offsets(total: int, length: int, mode: str = "tiled", k: int | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    if length > total:
        raise LengthError(f"slice of {length} timesteps does not fit in {total}")
    if length < 1:
        raise LengthError("slice length must be positive")
    if mode == "tiled":
        return np.arange(total // length) * length
    if mode == "random":
        if k is None or k < 1 or rng is None:
            raise UsageError("random slicing needs k >= 1 and a generator")
        return rng.integers(0, total - length + 1, size=k)
    raise UsageError(f"unknown slicing mode {mode!r}")


def extract_slices(sample: MinuteSample, seq_length_s: float, mode: str = "tiled", k: int | None = None,
                   rng: np.random.Generator | None = None) -> list[SliceTensor]:
    L = slice_len(seq_length_s, sample.sample_period_ms)
    offs = slice_offsets(sample.values.shape[1], L, mode, k, rng)
    return [SliceTensor(sample.values[:, o:o + L], sample.key, int(o), sample.label) for o in offs]


@dataclass
class SliceSet:
    """Stacked slices ready for the network: ``x`` is (M, N, Ls), ``y`` holds category indices."""

    x: np.ndarray
    y: np.ndarray
    keys: list[str] = field(default_factory=list)
    offsets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def channels(self, idx) -> "SliceSet":
        return SliceSet(self.x[:, list(idx)], self.y, self.keys, self.offsets)


def stack_slices(samples: list[MinuteSample], seq_length_s: float, categories: list[int]) -> SliceSet:
    """Tiled slices of every sample, in sample order then ascending offset."""
    if not samples:
        raise UsageError("no samples to slice")
    N = samples[0].values.shape[0]
    L = slice_len(seq_length_s, samples[0].sample_period_ms)
    offs = slice_offsets(samples[0].values.shape[1], L)
    x = np.empty((len(samples) * len(offs), N, L))
    y = np.empty(len(samples) * len(offs), dtype=np.int64)
    keys, offsets = [], []
    r = 0
    for s in samples:
        for o in offs:
            x[r] = s.values[:, o:o + L]
            y[r] = categories.index(s.label)
            keys.append(s.key)
            offsets.append(o)
            r += 1
    return SliceSet(x, y, keys, np.asarray(offsets))


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]


def fit_normalizer(slices) -> Normalizer:
    """Per-channel mean and standard deviation over training slices only."""
    if isinstance(slices, SliceSet):
        x = slices.x
    elif isinstance(slices, np.ndarray):
        x = slices
    else:
        x = np.stack([s.values for s in slices]) if slices else np.empty((0, 0, 0))
    if x.ndim != 3 or x.shape[0] == 0:
        raise UsageError("normalizer needs a non-empty set of (N, L) slices")
    flat = x.transpose(1, 0, 2).reshape(x.shape[1], -1)
    mean = flat.mean(axis=1)
    std = np.maximum(flat.std(axis=1), STD_FLOOR)
    return Normalizer(mean, std)


# -- cross-validation ------------------------------------------------------------------

@dataclass
class FoldPlan:
    protocol: str
    assignment: dict[str, int]  # unit key -> test fold

    @property
    def n_folds(self) -> int:
        return max(self.assignment.values()) + 1 if self.assignment else 0

    def test_units(self, fold: int) -> list[str]:
        return [u for u, f in self.assignment.items() if f == fold]

    def train_units(self, fold: int) -> list[str]:
        return [u for u, f in self.assignment.items() if f != fold]

    def check_partition(self, units: list[str]) -> list[str]:
        """Problems with disjointness/coverage against the full unit list."""
        issues = []
        if sorted(self.assignment) != sorted(units):
            issues.append("fold plan does not cover exactly the given units")
        seen: set[str] = set()
        for f in range(self.n_folds):
            test = set(self.test_units(f))
            if test & seen:
                issues.append(f"fold {f} repeats test units")
            seen |= test
            if not test:
                issues.append(f"fold {f} has no test units")
        return issues

    def save(self, path) -> None:
        lines = [f"protocol={self.protocol}"] + [f"{u}\t{f}" for u, f in self.assignment.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        protocol = lines[0].split("=", 1)[1]
        assignment = {}
        for ln in lines[1:]:
            if ln.strip():
                u, f = ln.split("\t")
                assignment[u] = int(f)
        return cls(protocol, assignment)


def make_folds(recordings: list[Recording], protocol: str) -> FoldPlan:
    """Fivefold within-recording (fold i tests minutes [2i, 2i+2) of every
    recording, zero-based) or leave-one-recording-out."""
    protocol = PROTOCOL_ALIASES.get(protocol, protocol)
    if protocol == FIVEFOLD:
        assignment = {}
        for rec in recordings:
            split_minutes(rec)  # length check
            for m in range(MINUTES_PER_RECORDING):
                assignment[f"{rec.id}/{m}"] = m // 2
        return FoldPlan(FIVEFOLD, assignment)
    if protocol == LORO:
        if len(recordings) < 2:
            raise UsageError("leave-one-recording-out needs at least two recordings")
        return FoldPlan(LORO, {rec.id: i for i, rec in enumerate(recordings)})
    raise UsageError(f"unknown protocol {protocol!r}")


def unit_of(sample: MinuteSample, protocol: str) -> str:
    return sample.key if protocol == FIVEFOLD else sample.recording_id


@dataclass
class FoldData:
    fold: int
    train: list[MinuteSample]
    val: list[MinuteSample]
    test: list[MinuteSample]
    normalizer: Normalizer


def validation_split(samples: list[MinuteSample], fraction: float, rng: np.random.Generator):
    """Hold out ~``fraction`` of the samples per label (at least one when a label has two or more)."""
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(i)
    held = set()
    for label in sorted(by_label):
        idx = by_label[label]
        n = int(round(fraction * len(idx)))
        if n == 0 and len(idx) >= 2:
            n = 1
        held.update(int(i) for i in rng.choice(idx, size=n, replace=False))
    train = [s for i, s in enumerate(samples) if i not in held]
    val = [s for i, s in enumerate(samples) if i in held]
    return train, val


def materialize_fold(samples: list[MinuteSample], plan: FoldPlan, fold: int, seq_length_s: float,
                     val_fraction: float = 0.1, seed: int = 0) -> FoldData:
    """Train/validation/test minute samples for one fold plus a normalizer fitted on
    the training slices of that fold."""
    test_units = set(plan.test_units(fold))
    test = [s for s in samples if unit_of(s, plan.protocol) in test_units]
    rest = [s for s in samples if unit_of(s, plan.protocol) not in test_units]
    rng = np.random.default_rng([seed, fold, 7919])
    train, val = validation_split(rest, val_fraction, rng)
    L = slice_len(seq_length_s, train[0].sample_period_ms)
    covered = len(slice_offsets(train[0].values.shape[1], L)) * L
    # tiled slices cover the first `covered` timesteps of each sample
    segs = [s.values[:, :covered] for s in train]
    count = covered * len(segs)
    mean = sum(v.sum(axis=1) for v in segs) / count
    var = sum(((v - mean[:, None]) ** 2).sum(axis=1) for v in segs) / count
    return FoldData(fold, train, val, test, Normalizer(mean, np.maximum(np.sqrt(var), STD_FLOOR)))
