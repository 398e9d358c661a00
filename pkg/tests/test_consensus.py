import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_recording
from painmeter import consensus as cs
from painmeter.data import LengthError, MinuteSample
from painmeter.nn import model as nnmodel
from painmeter.nn.ops import UsageError


def clock_unit(label=0, n=60):
    """One-second samples whose single channel holds the sample index, so a slice knows where it starts."""
    return MinuteSample("u", 0, np.arange(n, dtype=np.float64)[None], label, sample_period_ms=1000.0)


def coin_classifier(q, seed):
    """Independent-slice model: index 0 with probability q, else 1."""
    rng = np.random.default_rng(seed)
    return lambda x: (rng.random(x.shape[0]) >= q).astype(np.int64)


def majority_closed_form(q, k):
    # odd k, C=2: P(Binomial(k, q) > k/2)
    return sum(math.comb(k, j) * q ** j * (1 - q) ** (k - j) for j in range(k // 2 + 1, k + 1))


def test_unanimous_and_tie():
    pred, tally = cs.consensus_predict(lambda x: np.full(x.shape[0], 2), clock_unit(), k=7, n_classes=4)
    assert pred == 2 and tally.counts == (0, 0, 7, 0)
    assert cs.plurality([50, 50]) == 0
    assert cs.VoteTally((50, 50), 100).winner == 0


@given(st.lists(st.integers(0, 6), min_size=1, max_size=60))
def test_plurality_matches_recount(preds):
    tally = cs.VoteTally.from_predictions(preds, 7)
    best = max(tally.counts)
    scan = next(i for i in range(7) if tally.counts[i] == best)
    assert tally.winner == scan
    assert sum(tally.counts) == len(preds)


def test_plurality_recount_random_tallies(rng):
    for _ in range(1000):
        counts = rng.integers(0, 6, int(rng.integers(2, 8)))
        assert cs.plurality(counts) == min(i for i, c in enumerate(counts) if c == counts.max())


def test_tally_validation():
    with pytest.raises(ValueError):
        cs.VoteTally((1, 2), 4)
    with pytest.raises(UsageError):
        cs.VoteTally.from_predictions([0, 3], 3)
    with pytest.raises(UsageError):
        cs.plurality([])


def test_draw_offsets_errors_and_prefix():
    u = clock_unit()
    with pytest.raises(UsageError):
        cs.draw_offsets(u, 0, 0)
    with pytest.raises(LengthError):
        cs.draw_offsets(u, 5, 0, seq_length_s=61.0)
    a, b = cs.draw_offsets(u, 10, [3, 1]), cs.draw_offsets(u, 40, [3, 1])
    np.testing.assert_array_equal(a, b[:10])
    assert b.min() >= 0 and b.max() <= 45


def test_slices_are_taken_at_offsets():
    seen = []
    cs.classify_offsets(lambda x: seen.extend(x[:, 0, 0]) or np.zeros(x.shape[0], int), clock_unit(), [0, 7, 45])
    assert seen == [0, 7, 45]


def test_network_consensus_is_deterministic():
    rec = make_recording(2, 4000)
    unit = MinuteSample(rec.id, 0, np.asarray(rec.values), 1)
    arch = nnmodel.cnn_architecture(2, 1000, 3, filters=4)
    p = nnmodel.init_params(arch, np.random.default_rng(0))
    r1 = cs.consensus_predict(p, unit, k=9, seed=5)
    r2 = cs.consensus_predict(p, unit, k=9, seed=5)
    assert r1 == r2 and r1[1].total == 9
    assert r1[1].counts[r1[0]] == max(r1[1].counts)
    with pytest.raises(UsageError):
        cs.consensus_predict(lambda x: x, unit, k=3)


def test_threaded_classification_keeps_order():
    from concurrent.futures import ThreadPoolExecutor
    u = clock_unit()
    offs = cs.draw_offsets(u, 300, 0)
    read_start = lambda x: x[:, 0, 0].astype(np.int64)  # noqa: E731
    with ThreadPoolExecutor(3) as ex:
        np.testing.assert_array_equal(cs.classify_offsets(read_start, u, offs, executor=ex), offs)


def test_curve_prefix_matches_independent_calls():
    units = [clock_unit() for _ in range(5)]
    clf = lambda x: (x[:, 0, 0] > 20).astype(np.int64)  # noqa: E731
    rows, tallies = cs.consensus_curve(clf, units, [0] * 5, [1, 3, 9], seed=2, n_classes=2)
    for i, u in enumerate(units):
        assert cs.consensus_predict(clf, u, k=3, seed=cs.unit_seed(2, i), n_classes=2)[1] == tallies[3][i]
    assert [k for k, _ in rows] == [1, 3, 9]
    with pytest.raises(UsageError):
        cs.consensus_curve(clf, units, [0] * 5, [3, 1], n_classes=2)
    with pytest.raises(UsageError):
        cs.consensus_curve(clf, [], [], [1], n_classes=2)


def test_k1_matches_slice_accuracy():
    units = [clock_unit() for _ in range(2000)]
    rows, _ = cs.consensus_curve(coin_classifier(0.7, 0), units, [0] * 2000, [1], n_classes=2)
    assert abs(rows[0][1] - 0.7) <= 0.03


def test_binomial_majority_curve():
    n, q, ks = 10_000, 0.8, [1, 3, 5, 11, 21, 51, 101]
    units = [clock_unit() for _ in range(n)]
    rows, _ = cs.consensus_curve(coin_classifier(q, 1), units, [0] * n, ks, n_classes=2)
    closed = [majority_closed_form(q, k) for k in ks]
    assert closed == sorted(closed)
    for (k, acc), ref in zip(rows, closed):
        assert abs(acc - ref) <= 0.02, k
    assert rows[-1][1] > 0.99


def test_unanimous_classifier_flat_curve():
    units = [clock_unit() for _ in range(20)]
    rows, _ = cs.consensus_curve(lambda x: np.ones(x.shape[0], int), units, [1] * 20, [1, 5, 50], n_classes=2)
    assert [a for _, a in rows] == [1.0, 1.0, 1.0]


@pytest.mark.parametrize("seed", range(30))
def test_confined_errors_cannot_flip(seed):
    # wrong only for slices starting in [33, 39) of 46 possible starts; the rest vote unanimously for 0
    unit = clock_unit()
    clf = lambda x: ((x[:, 0, 0] >= 33) & (x[:, 0, 0] < 39)).astype(np.int64)  # noqa: E731
    offs = cs.draw_offsets(unit, 25, seed)
    wrong = np.mean((offs >= 33) & (offs < 39))
    pred, tally = cs.consensus_predict(clf, unit, k=25, seed=seed, n_classes=2)
    assert tally.counts[1] / 25 == wrong
    if wrong < 0.5:
        assert pred == 0


def test_curve_file_round_trip(tmp_path):
    rows = [(1, 0.5), (10, 0.875)]
    cs.write_curve(rows, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "k,accuracy"
    assert cs.read_curve(tmp_path / "c.csv") == rows
