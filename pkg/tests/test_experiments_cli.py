import numpy as np
import pytest

from painmeter import cli, data, experiments, trainer
from painmeter.nn.ops import UsageError

FAST = trainer.TrainConfig(max_steps=8, validation_every_steps=4, learning_rate=3e-3)
SMALL = experiments.ModelSpec("cnn", filters=4)


def test_fivefold_fold_structure(toy_recordings):
    res = experiments.run_protocol(toy_recordings, [1, 2], "fivefold", SMALL, FAST, folds=[0], consensus_k=5)
    fold = res.folds[0]
    assert len(fold.unit_ids) == 8  # two test minutes from each of four recordings
    assert len(fold.slice_preds) == 32
    assert fold.consensus_fractions.shape == (8, 2)
    np.testing.assert_allclose(fold.consensus_fractions.sum(axis=1), 1.0)
    rep = res.report()
    assert rep.slice_accuracy == fold.slice_accuracy
    assert "fold" in res.fold_table()


def test_recording_granularity_joins_test_minutes(toy_recordings):
    res = experiments.run_protocol(toy_recordings, [1, 2], "fivefold", SMALL, FAST, folds=[1], consensus_k=3,
                                   granularity="recording")
    assert len(res.folds[0].unit_ids) == 4


def test_protocol_is_deterministic(toy_recordings):
    a = experiments.run_protocol(toy_recordings, [1, 2], "loro", SMALL, FAST, folds=[2], consensus_k=4)
    b = experiments.run_protocol(toy_recordings, [1, 2], "loro", SMALL, FAST, folds=[2], consensus_k=4)
    np.testing.assert_array_equal(a.folds[0].slice_preds, b.folds[0].slice_preds)
    np.testing.assert_array_equal(a.folds[0].consensus_fractions, b.folds[0].consensus_fractions)


def test_fold_index_checked(toy_recordings):
    with pytest.raises(UsageError):
        experiments.run_protocol(toy_recordings, [1, 2], "loro", SMALL, FAST, folds=[4])


def test_seqlen_single_length_matches_standalone(toy_recordings):
    rows = experiments.seqlen_sweep(toy_recordings, [1, 2], [15], SMALL, FAST, folds=[0])
    solo = experiments.run_protocol(toy_recordings, [1, 2], "fivefold", SMALL, FAST, folds=[0], consensus_k=1)
    assert rows == [(15.0, 4, solo.slice_accuracy)]


@pytest.mark.parametrize("length", [5, 7, 30, 60])
def test_tiled_slice_count(length):
    period = 15.0
    L = data.slice_len(length, period)
    assert len(data.slice_offsets(data.samples_per_minute(period), L)) == 60 // length


def test_seqlen_rejects_oversized(toy_recordings):
    with pytest.raises(UsageError):
        experiments.seqlen_sweep(toy_recordings, [1, 2], [61], SMALL, FAST)


def test_ablation_ranks_informative_channel_first(toy_recordings):
    # the planted shift is a mean offset, which the spectral features of the LR cannot see
    cfg = FAST.replace(max_steps=40, validation_every_steps=10)
    rows = experiments.sensor_ablation(toy_recordings, [1, 2], SMALL, cfg, folds=[0, 1])
    assert [r[0] for r in rows] == ["c0", "c1"]
    assert rows[0][2] > 0.9 and abs(rows[1][2] - 0.5) < 0.25


@pytest.mark.parametrize("kind", ["mlp", "lr"])
def test_baseline_kinds_run(kind, toy_recordings):
    spec = experiments.ModelSpec(kind, mlp_hidden=(8, 8, 8))
    res = experiments.run_protocol(toy_recordings, [1, 2], "fivefold", spec, FAST, folds=[0], consensus_k=2)
    assert 0.0 <= res.slice_accuracy <= 1.0


def test_write_table(tmp_path):
    experiments.write_table([("a", 0.5), ("b", 1)], ("name", "acc"), tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "name,acc\na,0.5\nb,1\n"


# -- command line ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--preset", "dataset1", "--out", str(out), "--set", "minutes=10"]) == 0
    return out


def _outputs(run):
    return dict(line.split("\t") for line in (run / "outputs.txt").read_text().splitlines())


def test_cli_train_report_eval(dataset, tmp_path):
    run = tmp_path / "train"
    args = ["train", "--data", str(dataset), "--fold", "0", "--filters", "4", "--max-steps", "6",
            "--consensus", "5", "--out", str(run)]
    assert cli.main(args) == 0
    outs = _outputs(run)
    assert {"metrics.txt", "predictions.csv", "consensus.csv", "fold0.ckpt"} <= set(outs)
    assert "arg max_steps=6" in (run / "run.log").read_text()

    again = tmp_path / "again"
    assert cli.main(args[:-1] + [str(again)]) == 0
    assert _outputs(again) == outs  # same seed, same bytes

    rep = tmp_path / "report"
    assert cli.main(["report", "--run", str(run), "--out", str(rep)]) == 0
    assert (rep / "metrics.txt").read_text() == (run / "metrics.txt").read_text()

    ev = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(dataset), "--checkpoint", str(run / "fold0.ckpt"), "--fold", "0",
                     "--consensus", "3", "--out", str(ev)]) == 0
    assert (ev / "metrics.txt").read_text().startswith("slice_accuracy=")

    cur = tmp_path / "curve"
    assert cli.main(["consensus", "--data", str(dataset), "--checkpoint", str(run / "fold0.ckpt"), "--fold", "0",
                     "--k", "1,3", "--out", str(cur)]) == 0
    assert (cur / "consensus_curve.csv").read_text().splitlines()[0] == "k,accuracy"


def test_cli_errors(dataset, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--data", str(dataset), "--bogus"])
    assert e.value.code == 2
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 1
    assert "painmeter train: error:" in capsys.readouterr().err
    assert cli.main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "y")]) == 1


def test_cli_sweep_and_ablate(dataset, tmp_path):
    sw = tmp_path / "sweep"
    assert cli.main(["sweep-seqlen", "--data", str(dataset), "--fold", "0", "--lengths", "30,60", "--model", "lr",
                     "--out", str(sw)]) == 0
    lines = (sw / "seqlen_sweep.csv").read_text().splitlines()
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["30.0", "2"], ["60.0", "1"]]

    ab = tmp_path / "ablate"
    assert cli.main(["ablate", "--data", str(dataset), "--fold", "0", "--model", "lr", "--out", str(ab)]) == 0
    rows = (ab / "ablation.csv").read_text().splitlines()
    assert len(rows) == 16
    accs = [float(r.split(",")[-1]) for r in rows[1:]]
    assert accs == sorted(accs, reverse=True)
