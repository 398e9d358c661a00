"""Labeled multichannel recordings and their plain-text storage format.

Recording file::

    id=<text>
    subject=<text>
    pain_score=<int>
    sample_period_ms=<real>
    kind:placement:name,kind:placement:name,...      (N channel specs)
    v_1,v_2,...,v_N                                   (one line per timestep)

Values are written with Python's shortest round-trip ``repr`` so a
save/load cycle is bit-exact. A dataset manifest lists the category values
and one recording path per line (relative paths resolve against the
manifest's directory)::

    dataset=<text>
    categories=<int>,<int>,...
    <path>
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNEL_KINDS = ("pulse", "temperature", "gsr", "accel", "gyro", "force")
CANONICAL_PERIOD_MS = 15.0
MIN_SCORE, MAX_SCORE = 0, 10


class FormatError(ValueError):
    """Recording or manifest text does not follow the file layout."""


class DataError(ValueError):
    """Recording values violate an invariant (non-finite, ragged rows)."""


class ManifestError(ValueError):
    """Metadata missing or out of range."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str
    placement: str = ""

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ManifestError(f"channel {self.name!r}: unknown kind {self.kind!r}")
        for part in (self.name, self.kind, self.placement):
            if ":" in part or "," in part or "\n" in part:
                raise ManifestError(f"channel field {part!r} may not contain ':' ',' or newlines")
        if not self.name:
            raise ManifestError("channel name must be non-empty")

    def encode(self) -> str:
        return f"{self.kind}:{self.placement}:{self.name}"

    @classmethod
    def decode(cls, text: str) -> "ChannelSpec":
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise FormatError(f"channel spec {text!r} is not kind:placement:name")
        kind, placement, name = parts
        return cls(name=name, kind=kind, placement=placement)


@dataclass(frozen=True, eq=False)
class Recording:
    id: str
    subject_id: str
    pain_score: int
    channels: tuple[ChannelSpec, ...]
    values: np.ndarray  # (N, T)
    sample_period_ms: float = CANONICAL_PERIOD_MS

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        validate_recording(self)
        values.flags.writeable = False

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[1]

    def channel_index(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(name)

    def select(self, indices) -> "Recording":
        """View restricted to the given channel rows (order preserved as given)."""
        idx = list(indices)
        return Recording(self.id, self.subject_id, self.pain_score, tuple(self.channels[i] for i in idx),
                         self.values[idx], self.sample_period_ms)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (self.id == other.id and self.subject_id == other.subject_id
                and self.pain_score == other.pain_score and self.channels == other.channels
                and self.sample_period_ms == other.sample_period_ms
                and self.values.shape == other.values.shape
                and np.array_equal(self.values.view(np.uint64), other.values.view(np.uint64)))


def validate_recording(rec: Recording) -> None:
    for label, text in (("id", rec.id), ("subject", rec.subject_id)):
        if not text or "\n" in text:
            raise ManifestError(f"recording {label} must be a non-empty single line")
    if not isinstance(rec.pain_score, (int, np.integer)) or not MIN_SCORE <= rec.pain_score <= MAX_SCORE:
        raise ManifestError(f"pain_score {rec.pain_score!r} outside [{MIN_SCORE}, {MAX_SCORE}]")
    if not rec.sample_period_ms > 0 or not np.isfinite(rec.sample_period_ms):
        raise ManifestError("sample_period_ms must be a positive real")
    if len(rec.channels) == 0:
        raise DataError("recording has no channels")
    names = [c.name for c in rec.channels]
    if len(set(names)) != len(names):
        raise ManifestError("channel names must be unique")
    v = rec.values
    if v.ndim != 2 or v.shape[0] != len(rec.channels):
        raise DataError(f"value grid {v.shape} does not match {len(rec.channels)} channels")
    if v.shape[1] < 1:
        raise DataError("recording needs at least one timestep")
    bad = np.argwhere(~np.isfinite(v))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"non-finite value at channel row {r}, timestep {c}")


# -- reading / writing --------------------------------------------------------------------

def _meta_line(line: str, key: str) -> str:
    if "=" not in line:
        raise FormatError(f"expected '{key}=...' header line, got {line[:40]!r}")
    k, v = line.split("=", 1)
    if k.strip() != key:
        raise ManifestError(f"missing metadata key {key!r} (found {k.strip()!r})")
    return v.strip()


def load_recording(path) -> Recording:
    with open(path, "r", encoding="utf-8") as fh:
        header = [fh.readline().rstrip("\n") for _ in range(5)]
        body = fh.read()
    if any(h == "" for h in header):
        raise FormatError(f"{path}: truncated header")
    rec_id = _meta_line(header[0], "id")
    subject = _meta_line(header[1], "subject")
    try:
        score = int(_meta_line(header[2], "pain_score"))
        period = float(_meta_line(header[3], "sample_period_ms"))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    channels = tuple(ChannelSpec.decode(t) for t in header[4].split(","))
    n = len(channels)
    rows = body.splitlines()
    if not rows:
        raise DataError(f"{path}: no samples")
    for lineno, row in enumerate(rows, start=6):
        if row.count(",") != n - 1:
            raise DataError(f"{path}:{lineno}: expected {n} values, got {row.count(',') + 1}")
    try:
        values = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    return Recording(rec_id, subject, score, channels, values.T.copy(), period)


def save_recording(rec: Recording, path) -> None:
    validate_recording(rec)
    lines = [
        f"id={rec.id}",
        f"subject={rec.subject_id}",
        f"pain_score={int(rec.pain_score)}",
        f"sample_period_ms={rec.sample_period_ms!r}",
        ",".join(c.encode() for c in rec.channels),
    ]
    cols = rec.values.T.tolist()
    lines.extend(",".join(map(repr, row)) for row in cols)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class DatasetManifest:
    dataset_name: str
    category_values: list[int]
    recording_paths: list[str]
    root: Path = field(default_factory=Path)
    recording_ids: list[str] = field(default_factory=list)

    @property
    def num_categories(self) -> int:
        return len(self.category_values)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path

    def index_of(self, score: int) -> int:
        return self.category_values.index(score)

    def load_all(self) -> list[Recording]:
        return [load_recording(self.resolve(p)) for p in self.recording_paths]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) < 2:
        raise FormatError(f"{path}: manifest needs dataset and categories lines")
    name = _meta_line(lines[0], "dataset")
    cats_text = _meta_line(lines[1], "categories")
    try:
        cats = [int(c) for c in cats_text.split(",") if c.strip()]
    except ValueError:
        raise FormatError(f"{path}: categories must be integers") from None
    return DatasetManifest(name, cats, lines[2:], path.parent)


def save_manifest(m: DatasetManifest, path) -> None:
    lines = [f"dataset={m.dataset_name}", "categories=" + ",".join(str(c) for c in m.category_values)]
    lines += list(m.recording_paths)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def validate_manifest(m: DatasetManifest) -> list[str]:
    """Human-readable problems with a manifest; empty when everything loads."""
    issues = []
    cats = list(m.category_values)
    if cats != sorted(set(cats)):
        issues.append("categories must be distinct and sorted ascending")
    if len(cats) < 2:
        issues.append("at least two categories required")
    seen_ids: set[str] = set()
    for p in m.recording_paths:
        path = m.resolve(p)
        if not path.exists():
            issues.append(f"missing file: {p}")
            continue
        try:
            rec = load_recording(path)
        except (FormatError, DataError, ManifestError, OSError) as e:
            issues.append(f"{p}: {e}")
            continue
        if rec.pain_score not in cats:
            issues.append(f"{p}: pain score {rec.pain_score} not in categories {cats}")
        if rec.id in seen_ids:
            issues.append(f"{p}: duplicate recording id {rec.id}")
        seen_ids.add(rec.id)
    return issues
