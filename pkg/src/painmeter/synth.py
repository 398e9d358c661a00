"""Synthetic Pain-Meter recordings with planted, label-dependent structure.

Signal model per recording (score ``y``, subject offset ``o``):

* pulse channels: PPG-like double-bump wave (systolic peak plus dicrotic wave,
  two Gaussians per period) at ``60 + hr_slope*y + o`` bpm with slow heart-rate
  variability, per-sensor transit delay, and white noise;
* motion bursts at Poisson times (rate ``burst_slope*y`` per minute) that
  corrupt the channels closest to the moving body part;
* GSR: subject baseline, slow drift, and skin-conductance responses at rate
  ``gsr_base + gsr_slope*y`` per minute;
* temperature: fixed per-placement level plus a short-memory random drift,
  identical in law for every recording, so it carries no label, subject or
  recording information;
* accelerometer / gyroscope / force (25-channel layout): sensor noise plus the
  motion bursts.

All randomness derives from one master seed through named sub-streams.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from painmeter.signal_store import (
    CANONICAL_PERIOD_MS,
    ChannelSpec,
    DatasetManifest,
    Recording,
    save_manifest,
    save_recording,
)

# (kind, placement, name, body region)
LAYOUT_15 = [
    ("pulse", "left temple", "pulse_temple_l", "head"),
    ("pulse", "right temple", "pulse_temple_r", "head"),
    ("pulse", "left carotid", "pulse_neck_l", "neck"),
    ("pulse", "right carotid", "pulse_neck_r", "neck"),
    ("pulse", "back of neck", "pulse_neck_back", "neck"),
    ("pulse", "fingertip", "pulse_finger", "hand"),
    ("pulse", "palm near wrist", "pulse_palm", "hand"),
    ("temperature", "left temple", "temp_temple_l", "head"),
    ("temperature", "right temple", "temp_temple_r", "head"),
    ("temperature", "left carotid", "temp_neck_l", "neck"),
    ("temperature", "right carotid", "temp_neck_r", "neck"),
    ("temperature", "back of neck", "temp_neck_back", "neck"),
    ("temperature", "fingertip", "temp_finger", "hand"),
    ("temperature", "palm near wrist", "temp_palm", "hand"),
    ("gsr", "hand rest", "gsr_hand", "hand"),
]

LAYOUT_25 = [
    ("pulse", "left temple", "pulse_temple_l", "head"),
    ("pulse", "right temple", "pulse_temple_r", "head"),
    ("pulse", "left neck", "pulse_neck_l", "neck"),
    ("pulse", "right neck", "pulse_neck_r", "neck"),
    ("pulse", "back of neck", "pulse_neck_back", "neck"),
    ("pulse", "fingertip", "pulse_finger", "hand"),
    ("temperature", "neck", "temp_neck", "neck"),
    ("temperature", "fingertip", "temp_finger", "hand"),
    ("accel", "headband x", "acc_head_x", "head"),
    ("accel", "headband y", "acc_head_y", "head"),
    ("accel", "headband z", "acc_head_z", "head"),
    ("accel", "wristband x", "acc_wrist_x", "hand"),
    ("accel", "wristband y", "acc_wrist_y", "hand"),
    ("accel", "wristband z", "acc_wrist_z", "hand"),
    ("gyro", "headband x", "gyro_head_x", "head"),
    ("gyro", "headband y", "gyro_head_y", "head"),
    ("gyro", "headband z", "gyro_head_z", "head"),
    ("gyro", "wristband x", "gyro_wrist_x", "hand"),
    ("gyro", "wristband y", "gyro_wrist_y", "hand"),
    ("gyro", "wristband z", "gyro_wrist_z", "hand"),
    ("force", "forehead", "force_forehead", "head"),
    ("force", "back of neck", "force_neck_back", "neck"),
    ("force", "side of neck", "force_neck_side", "neck"),
    ("force", "wristband", "force_wrist", "hand"),
    ("gsr", "middle and ring fingers", "gsr_fingers", "hand"),
]

LAYOUTS = {"dataset1": LAYOUT_15, "dataset2": LAYOUT_25}

# pulse arrival delay after the heart beat, seconds
TRANSIT_S = {"head": 0.06, "neck": 0.04, "hand": 0.16}
# how strongly a motion of region A shows up in a pulse sensor in region B
COUPLING = {
    ("hand", "hand"): 1.0, ("hand", "neck"): 0.05, ("hand", "head"): 0.05,
    ("head", "head"): 0.6, ("head", "neck"): 0.3, ("head", "hand"): 0.02,
}


@dataclass(frozen=True)
class SynthSpec:
    name: str = "synthetic"
    layout: str = "dataset1"
    num_subjects: int = 1
    recordings_per_subject: tuple[int, ...] = (4,)
    category_values: tuple[int, ...] = (1, 2)
    scores: tuple[int, ...] | None = None  # explicit per-recording scores, in recording order
    score_weights: tuple[float, ...] | None = None  # used when scores is None
    hr_slope: float = 5.0  # bpm per pain unit
    burst_slope: float = 1.0  # motion bursts per minute per pain unit
    gsr_slope: float = 1.0  # skin-conductance responses per minute per pain unit
    gsr_base: float = 1.0
    noise: float = 0.15  # white noise, fraction of pulse amplitude
    subject_hr_sigma: float = 5.0
    recording_hr_sigma: float = 1.0
    hrv_bpm: float = 8.0  # amplitude of heart-rate wander
    dicrotic_decay: float = 0.3  # dicrotic wave height is 0.7 * exp(-dicrotic_decay * score)
    subject_dicrotic_sigma: float = 0.15  # log-scale spread of dicrotic height across subjects
    session_spread: float = 1.0  # scale of per-session motion/force sensor baselines; 0 makes them identical
    minutes: int = 10
    sample_period_ms: float = CANONICAL_PERIOD_MS
    seed: int = 0

    def __post_init__(self):
        for k in ("hr_slope", "burst_slope", "gsr_slope", "gsr_base", "noise", "subject_hr_sigma",
                  "recording_hr_sigma", "hrv_bpm", "dicrotic_decay", "subject_dicrotic_sigma", "session_spread"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if len(self.recordings_per_subject) != self.num_subjects:
            raise ValueError("recordings_per_subject needs one entry per subject")
        if list(self.category_values) != sorted(set(self.category_values)):
            raise ValueError("category_values must be sorted and distinct")
        n = self.n_recordings
        if self.scores is not None:
            if len(self.scores) != n or any(s not in self.category_values for s in self.scores):
                raise ValueError("scores must give one listed category per recording")

    @property
    def n_recordings(self) -> int:
        return int(sum(self.recordings_per_subject))

    def with_(self, **changes) -> "SynthSpec":
        return replace(self, **changes)


def dataset1_preset(seed: int = 0) -> SynthSpec:
    """One subject, four 15-channel recordings, scores 1 and 2 in equal numbers."""
    return SynthSpec(name="dataset1", layout="dataset1", num_subjects=1, recordings_per_subject=(4,),
                     category_values=(1, 2), scores=(1, 2, 1, 2), dicrotic_decay=0.8, seed=seed)


DATASET2_WEIGHTS = (0.06, 0.13, 0.37, 0.16, 0.12, 0.09, 0.07)


def dataset2_preset(seed: int = 0) -> SynthSpec:
    """Twenty subjects, 62 25-channel recordings, scores 0-6 skewed toward 2.

    Per-recording heart-rate jitter of 3 bpm is what makes unseen recordings
    harder than unseen minutes of seen recordings; session baselines are off
    so that errors stay ordinal.
    """
    per_subject = (4, 4) + (3,) * 18
    return SynthSpec(name="dataset2", layout="dataset2", num_subjects=20, recordings_per_subject=per_subject,
                     category_values=tuple(range(7)), score_weights=DATASET2_WEIGHTS, dicrotic_decay=0.4,
                     recording_hr_sigma=3.0, session_spread=0.0, seed=seed)


PRESETS = {"dataset1": dataset1_preset, "dataset2": dataset2_preset}


@dataclass
class GroundTruth:
    recording_id: str
    subject_id: str
    score: int
    heart_rate_bpm: float
    subject_offset_bpm: float
    burst_times_s: list[float] = field(default_factory=list)
    scr_times_s: list[float] = field(default_factory=list)


def _stream(seed: int, *names) -> np.random.Generator:
    key = [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def assign_scores(spec: SynthSpec) -> list[int]:
    if spec.scores is not None:
        return list(spec.scores)
    cats = list(spec.category_values)
    n = spec.n_recordings
    w = np.asarray(spec.score_weights if spec.score_weights is not None else [1.0] * len(cats), dtype=float)
    w = w / w.sum()
    quota = w * n
    counts = np.floor(quota).astype(int)
    counts[counts == 0] = 1  # every category present
    while counts.sum() > n:
        counts[np.argmax(counts)] -= 1
    for i in np.argsort(-(quota - np.floor(quota)), kind="stable"):
        if counts.sum() >= n:
            break
        counts[i] += 1
    scores = np.repeat(cats, counts)
    _stream(spec.seed, "scores").shuffle(scores)
    return [int(s) for s in scores]


def _pulse_wave(phase: np.ndarray, dicrotic: float = 0.45) -> np.ndarray:
    """Unit-height systolic Gaussian plus a smaller dicrotic Gaussian, in phase units."""
    def bump(center, width):
        d = (phase - center + 0.5) % 1.0 - 0.5
        return np.exp(-0.5 * (d / width) ** 2)
    return bump(0.18, 0.05) + dicrotic * bump(0.46, 0.07)


def _ou(rng, n, dt, tau, sigma):
    """Stationary Ornstein-Uhlenbeck path with correlation time ``tau``."""
    a = np.exp(-dt / tau)
    eps = rng.standard_normal(n) * sigma * np.sqrt(1 - a * a)
    x0 = rng.standard_normal() * sigma
    # x_i = a^(i+1) x0 + sum_j a^(i-j) eps_j, evaluated blockwise for stability
    out = np.empty(n)
    block = 256
    powers = a ** np.arange(block)
    lower = np.tril(a ** (np.arange(block)[:, None] - np.arange(block)[None, :]))
    state = x0
    for s in range(0, n, block):
        e = eps[s:s + block]
        m = len(e)
        seg = lower[:m, :m] @ e + state * powers[:m] * a
        out[s:s + m] = seg
        state = seg[-1]
    return out


def _orientation(seed: int, rec_index: int, region: str, spread: float = 1.0) -> np.ndarray:
    """Unit gravity direction in the frame of a body-worn band for one session."""
    v = spread * _stream(seed, "orientation", rec_index, region).normal(size=3) + np.array([0.0, 0.0, 2.0])
    return v / np.linalg.norm(v)


def _burst_shape(rng, dt):
    dur = rng.uniform(0.5, 1.5)
    n = max(int(dur / dt), 2)
    tt = np.arange(n) * dt
    freq = rng.uniform(2.0, 5.0)
    env = np.sin(np.pi * np.arange(n) / (n - 1)) ** 2
    return rng.uniform(0.8, 1.6) * env * np.sin(2 * np.pi * freq * tt + rng.uniform(0, 2 * np.pi))


def _scr_shape(dt, rise=1.0, decay=3.0, length=12.0):
    tt = np.arange(int(length / dt)) * dt
    s = (1 - np.exp(-tt / rise)) * np.exp(-tt / decay)
    return s / s.max()


def _poisson_times(rng, rate_per_min, duration_s):
    n = rng.poisson(rate_per_min * duration_s / 60.0)
    return np.sort(rng.uniform(0, duration_s, size=n))


def _add_events(signal, times, shapes, dt, gains):
    for t0, shape in zip(times, shapes):
        i0 = int(t0 / dt)
        seg = shape[: max(0, len(signal) - i0)]
        signal[i0:i0 + len(seg)] += gains * seg


def generate_recording(spec: SynthSpec, rec_index: int, subject_index: int, score: int) -> tuple[Recording, GroundTruth]:
    dt = spec.sample_period_ms / 1000.0
    T = int(round(spec.minutes * 60.0 / dt))
    t = np.arange(T) * dt
    layout = LAYOUTS[spec.layout]
    rec_id = f"{spec.name}_r{rec_index:03d}"
    subj_id = f"{spec.name}_s{subject_index:02d}"
    srng = _stream(spec.seed, "subject", subject_index)
    rrng = _stream(spec.seed, "recording", rec_index)

    subj_offset = srng.normal(0.0, spec.subject_hr_sigma)
    subj_amp = np.exp(srng.normal(0.0, 0.15))
    subj_gsr = 2.0 + srng.normal(0.0, 0.3)
    subj_dicrotic = srng.normal(0.0, spec.subject_dicrotic_sigma)

    hr0 = 60.0 + spec.hr_slope * score + subj_offset + rrng.normal(0.0, spec.recording_hr_sigma)
    hr = hr0 + spec.hrv_bpm * (0.6 * np.sin(2 * np.pi * 0.25 * t + rrng.uniform(0, 2 * np.pi))
                               + _ou(rrng, T, dt, 20.0, 0.6))
    beats = np.cumsum(hr / 60.0 * dt) + rrng.uniform()
    dicrotic = 0.7 * np.exp(-spec.dicrotic_decay * score + subj_dicrotic + rrng.normal(0.0, 0.05))

    duration = T * dt
    burst_times = _poisson_times(rrng, spec.burst_slope * score, duration)
    burst_src = np.where(rrng.random(len(burst_times)) < 0.7, "hand", "head")
    burst_shapes = [_burst_shape(rrng, dt) for _ in burst_times]
    scr_times = _poisson_times(rrng, spec.gsr_base + spec.gsr_slope * score, duration)
    scr = _scr_shape(dt)
    scr_amps = rrng.uniform(0.05, 0.15, size=len(scr_times))

    rows = []
    for kind, placement, name, region in layout:
        crng = _stream(spec.seed, "channel", rec_index, name)
        if kind == "pulse":
            amp = 0.5 * subj_amp * np.exp(crng.normal(0.0, 0.05))
            lag = TRANSIT_S[region] * hr0 / 60.0  # in beats
            x = 1.5 + amp * _pulse_wave(beats - lag, dicrotic) + crng.normal(0.0, spec.noise * amp, T)
            for src in ("hand", "head"):
                sel = burst_src == src
                _add_events(x, burst_times[sel], [s for s, k in zip(burst_shapes, sel) if k], dt,
                            amp * COUPLING[(src, region)])
        elif kind == "temperature":
            level = 0.75 + 0.01 * (zlib.crc32(placement.encode()) % 7)
            x = level + _ou(crng, T, dt, 5.0, 0.01) + crng.normal(0.0, 0.002, T)
        elif kind == "gsr":
            x = subj_gsr + _ou(crng, T, dt, 60.0, 0.05) + crng.normal(0.0, 0.005, T)
            for t0, a in zip(scr_times, scr_amps):
                _add_events(x, [t0], [scr], dt, a)
            if region == "hand":
                _add_events(x, burst_times[burst_src == "hand"],
                            [s for s, k in zip(burst_shapes, burst_src == "hand") if k], dt, 0.02)
        else:
            # session-specific baselines: band orientation sets the gravity share of
            # each accelerometer axis, strap tightness sets the force reading
            if kind == "accel":
                axis = "xyz".index(name[-1])
                base = 1.65 + 0.33 * _orientation(spec.seed, rec_index, region, spec.session_spread)[axis]
            elif kind == "gyro":
                base = 1.65 + spec.session_spread * crng.normal(0.0, 0.01)
            else:
                base = 0.5 + spec.session_spread * (crng.uniform(0.2, 0.8) - 0.5)
            gain = {"accel": 0.3, "gyro": 0.4, "force": 0.2}[kind] * crng.uniform(0.5, 1.0)
            x = base + crng.normal(0.0, 0.01, T)
            sel = burst_src == region
            _add_events(x, burst_times[sel], [s for s, k in zip(burst_shapes, sel) if k], dt, gain)
        rows.append(np.round(x, 4))
    channels = tuple(ChannelSpec(name, kind, placement) for kind, placement, name, _ in layout)
    rec = Recording(rec_id, subj_id, int(score), channels, np.vstack(rows), spec.sample_period_ms)
    truth = GroundTruth(rec_id, subj_id, int(score), float(hr0), float(subj_offset),
                        [float(v) for v in burst_times], [float(v) for v in scr_times])
    return rec, truth


def generate(spec: SynthSpec, out_dir=None) -> tuple[DatasetManifest, list[Recording], list[GroundTruth]]:
    """Generate every recording of ``spec``; when ``out_dir`` is given also write the
    manifest, one file per recording and ``ground_truth.csv``."""
    scores = assign_scores(spec)
    recs, truths = [], []
    i = 0
    for subj, count in enumerate(spec.recordings_per_subject):
        for _ in range(count):
            rec, truth = generate_recording(spec, i, subj, scores[i])
            recs.append(rec)
            truths.append(truth)
            i += 1
    paths = [f"{r.id}.txt" for r in recs]
    manifest = DatasetManifest(spec.name, list(spec.category_values), paths,
                               Path(out_dir) if out_dir is not None else Path("."), [r.id for r in recs])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rec, p in zip(recs, paths):
            save_recording(rec, out / p)
        save_manifest(manifest, out / "manifest.txt")
        write_ground_truth(truths, out / "ground_truth.csv")
    return manifest, recs, truths


def write_ground_truth(truths: list[GroundTruth], path) -> None:
    lines = ["recording_id,subject_id,score,heart_rate_bpm,subject_offset_bpm,burst_times_s,scr_times_s"]
    for g in truths:
        lines.append(",".join([
            g.recording_id, g.subject_id, str(g.score), repr(g.heart_rate_bpm), repr(g.subject_offset_bpm),
            " ".join(f"{v:.3f}" for v in g.burst_times_s), " ".join(f"{v:.3f}" for v in g.scr_times_s),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
