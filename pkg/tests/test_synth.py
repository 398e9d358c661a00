import numpy as np
import pytest

from painmeter import baselines as bl
from painmeter import data, synth, trainer
from painmeter.nn import model as nnmodel
from painmeter.signal_store import CANONICAL_PERIOD_MS, load_manifest, load_recording, validate_manifest


def dominant_hz(x, period_ms=CANONICAL_PERIOD_MS, lo=0.7, hi=3.0):
    x = x - x.mean()
    mag = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(len(x), period_ms / 1000.0)
    band = (freqs > lo) & (freqs < hi)
    return freqs[band][mag[band].argmax()]


def pulse_rows(rec):
    return [i for i, c in enumerate(rec.channels) if c.kind == "pulse"]


def test_dataset1_preset_shape():
    spec = synth.dataset1_preset()
    _, recs, _ = synth.generate(spec)
    assert len(recs) == 4 and {r.subject_id for r in recs} == {recs[0].subject_id}
    assert all(r.values.shape == (15, 40000) for r in recs)
    assert sorted(r.pain_score for r in recs) == [1, 1, 2, 2]


def test_dataset2_preset_shape():
    spec = synth.dataset2_preset().with_(minutes=1)
    _, recs, _ = synth.generate(spec)
    scores = np.bincount([r.pain_score for r in recs], minlength=7)
    assert len(recs) == 62 and len({r.subject_id for r in recs}) == 20
    assert all(r.values.shape[0] == 25 for r in recs)
    assert scores.min() >= 1 and scores.argmax() == 2


@pytest.mark.parametrize("preset", ["dataset1", "dataset2"])
def test_presets_write_valid_datasets(preset, tmp_path):
    spec = synth.PRESETS[preset]().with_(minutes=10 if preset == "dataset1" else 1)
    synth.generate(spec, tmp_path)
    m = load_manifest(tmp_path / "manifest.txt")
    assert validate_manifest(m) == []
    assert (tmp_path / "ground_truth.csv").read_text().startswith("recording_id,")
    rec = load_recording(tmp_path / m.recording_paths[0])
    assert rec.sample_period_ms == 15.0


def test_planted_rate_gap_between_labels():
    # no wander or jitter: the peak sits on the planted rate
    spec = synth.dataset1_preset().with_(hrv_bpm=0.0, recording_hr_sigma=0.0)
    _, recs, truth = synth.generate(spec)
    peaks = {r.pain_score: dominant_hz(r.values[pulse_rows(r)[0]]) for r in recs}
    res = 1.0 / (10 * 60)  # bin width of a 10-minute transform
    assert abs((peaks[2] - peaks[1]) - 5.0 / 60.0) <= 2 * res
    for r, g in zip(recs, truth):
        assert abs(dominant_hz(r.values[0]) - g.heart_rate_bpm / 60.0) <= res


def test_mean_dominant_rate_increases_with_label():
    spec = synth.SynthSpec(layout="dataset1", num_subjects=35, recordings_per_subject=(1,) * 35,
                           category_values=tuple(range(7)), minutes=2)
    _, recs, _ = synth.generate(spec)
    scores = np.array([r.pain_score for r in recs])
    peaks = np.array([dominant_hz(r.values[0]) for r in recs])
    means = [peaks[scores == c].mean() for c in range(7)]
    assert np.all(np.diff(means) > 0)


def test_same_seed_is_bit_identical(tmp_path):
    spec = synth.dataset2_preset(seed=3).with_(minutes=1, num_subjects=2, recordings_per_subject=(2, 1))
    synth.generate(spec, tmp_path / "a")
    synth.generate(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    _, r1, _ = synth.generate(spec.with_(seed=4))
    _, r2, _ = synth.generate(spec)
    assert not np.array_equal(r1[0].values, r2[0].values)


def test_score_assignment():
    spec = synth.dataset2_preset()
    scores = synth.assign_scores(spec)
    counts = np.bincount(scores, minlength=7)
    assert counts.sum() == 62 and counts.min() >= 1
    np.testing.assert_allclose(counts / 62, synth.DATASET2_WEIGHTS, atol=0.02)
    assert synth.assign_scores(spec) == scores


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.SynthSpec(hr_slope=-1)
    with pytest.raises(ValueError):
        synth.SynthSpec(layout="nope")
    with pytest.raises(ValueError):
        synth.SynthSpec(num_subjects=2, recordings_per_subject=(4,))
    with pytest.raises(ValueError):
        synth.SynthSpec(scores=(1, 2, 3, 1))


def test_bursts_scale_with_score():
    spec = synth.dataset1_preset().with_(burst_slope=3.0)
    _, _, truth = synth.generate(spec)
    low = sum(len(g.burst_times_s) for g in truth if g.score == 1)
    high = sum(len(g.burst_times_s) for g in truth if g.score == 2)
    assert high > low


def _temperature_fold(spec):
    _, recs, _ = synth.generate(spec)
    temp = [i for i, c in enumerate(recs[0].channels) if c.kind == "temperature"]
    recs = [r.select(temp) for r in recs]
    plan = data.make_folds(recs, "fivefold")
    samples = [s for r in recs for s in data.split_minutes(r)]
    fd = data.materialize_fold(samples, plan, 0, 15.0)
    cats = list(spec.category_values)
    return fd, [data.stack_slices(s, 15.0, cats) for s in (fd.train, fd.val, fd.test)]


def test_temperature_only_logistic_is_at_chance():
    spec = synth.dataset1_preset()
    _, (tr, va, te) = _temperature_fold(spec)
    model = bl.fit_logistic_baseline(tr.x, tr.y, 2, va.x, va.y, bins=16)
    assert abs(np.mean(model.predict_slices(te.x) == te.y) - 0.5) <= 0.1


def test_no_planted_signal_gives_chance_cnn():
    flat = dict(hr_slope=0.0, burst_slope=0.0, gsr_slope=0.0, dicrotic_decay=0.0)
    spec = synth.dataset1_preset().with_(**flat)
    _, recs, _ = synth.generate(spec)
    plan = data.make_folds(recs, "fivefold")
    samples = [s for r in recs for s in data.split_minutes(r)]
    fd = data.materialize_fold(samples, plan, 0, 15.0)
    tr, va, te = (data.stack_slices(s, 15.0, [1, 2]) for s in (fd.train, fd.val, fd.test))
    p = nnmodel.init_params(nnmodel.cnn_architecture(15, tr.x.shape[2], 2, filters=8), np.random.default_rng(0))
    p.set_normalizer(fd.normalizer.mean, fd.normalizer.std)
    best, _ = trainer.train(p, tr, va, trainer.TrainConfig(max_steps=60, validation_every_steps=20,
                                                           learning_rate=3e-3))
    assert abs(trainer.evaluate(best, te).accuracy - 0.5) <= 0.1


def test_session_spread_controls_motion_baselines():
    base = synth.dataset2_preset().with_(minutes=1, num_subjects=1, recordings_per_subject=(3,))
    accel = [i for i, c in enumerate(synth.LAYOUT_25) if c[0] in ("accel", "force")]
    flat = [r.values[accel].mean(axis=1) for r in synth.generate(base.with_(session_spread=0.0))[1]]
    spread = [r.values[accel].mean(axis=1) for r in synth.generate(base.with_(session_spread=1.0))[1]]
    assert np.ptp(flat, axis=0).max() < 0.05  # only bursts and noise differ
    assert np.ptp(spread, axis=0).max() > 0.1
