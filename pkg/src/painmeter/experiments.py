"""Cross-validated runs of the CNN, MLP and logistic baselines, plus ablation and sweeps."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from painmeter import baselines, consensus, data, metrics, trainer
from painmeter.nn import model as nnmodel
from painmeter.nn.ops import UsageError
from painmeter.signal_store import Recording

log = logging.getLogger(__name__)

MODEL_KINDS = ("cnn", "mlp", "lr")
GRANULARITIES = ("minute", "recording")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "cnn"
    filters: int = 16
    n_conv: int = 2
    first_window: tuple[int, int] = (3, 25)
    mlp_hidden: tuple[int, ...] = (256, 128, 64)
    l2_grid: tuple[float, ...] = baselines.L2_GRID

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {self.kind!r}; choose from {', '.join(MODEL_KINDS)}")

    def build(self, n_channels: int, seq_len: int, n_classes: int, dropout: float, rng) -> nnmodel.ModelParams:
        if self.kind == "cnn":
            arch = nnmodel.cnn_architecture(n_channels, seq_len, n_classes, self.n_conv, self.filters,
                                            self.first_window, dropout=dropout)
        else:
            arch = nnmodel.mlp_architecture(n_channels, seq_len, n_classes, self.mlp_hidden, dropout)
        return nnmodel.init_params(arch, rng)


@dataclass
class FoldResult:
    fold: int
    slice_preds: np.ndarray
    slice_truths: np.ndarray
    unit_ids: list[str]
    consensus_preds: list[int]
    consensus_truths: list[int]
    consensus_fractions: np.ndarray  # (units, C)
    model: object = None
    train_report: trainer.TrainReport | None = None

    @property
    def slice_accuracy(self) -> float:
        return float(np.mean(self.slice_preds == self.slice_truths))

    @property
    def consensus_accuracy(self) -> float:
        return float(np.mean(np.equal(self.consensus_preds, self.consensus_truths)))


@dataclass
class ProtocolResult:
    protocol: str
    category_values: list[int]
    folds: list[FoldResult] = field(default_factory=list)

    def report(self) -> metrics.MetricsReport:
        cat = lambda attr: np.concatenate([np.asarray(getattr(f, attr)) for f in self.folds])  # noqa: E731
        return metrics.build_report(self.category_values, cat("slice_preds"), cat("slice_truths"),
                                    cat("consensus_preds"), cat("consensus_truths"),
                                    np.concatenate([f.consensus_fractions for f in self.folds]))

    @property
    def slice_accuracy(self) -> float:
        return self.report().slice_accuracy

    @property
    def consensus_accuracy(self) -> float:
        return self.report().consensus_accuracy

    def fold_table(self) -> str:
        rows = ["fold,slice_accuracy,consensus_accuracy,test_slices,test_units"]
        rows += [f"{f.fold},{f.slice_accuracy!r},{f.consensus_accuracy!r},{len(f.slice_preds)},{len(f.unit_ids)}"
                 for f in self.folds]
        return "\n".join(rows) + "\n"


def consensus_units(test: list[data.MinuteSample], recordings: dict[str, Recording], granularity: str):
    """Vote units of a test fold: each minute sample, or the test minutes of each recording joined in time order."""
    if granularity == "minute":
        return [(s.key, s) for s in test]
    if granularity != "recording":
        raise UsageError(f"unknown consensus granularity {granularity!r}")
    grouped: dict[str, list[data.MinuteSample]] = {}
    for s in test:
        grouped.setdefault(s.recording_id, []).append(s)
    units = []
    for rid, parts in grouped.items():
        parts = sorted(parts, key=lambda s: s.index)
        joined = np.concatenate([s.values for s in parts], axis=1)
        units.append((rid, dataclasses.replace(recordings[rid], values=joined)))
    return units


def _fit(spec: ModelSpec, fd: data.FoldData, tr: data.SliceSet, va: data.SliceSet, n_classes: int,
         config: trainer.TrainConfig, fold: int):
    if spec.kind == "lr":
        return baselines.fit_logistic_baseline(tr.x, tr.y, n_classes, va.x, va.y, l2_grid=spec.l2_grid), None
    rng = np.random.default_rng([config.seed, fold, 11])
    params = spec.build(tr.x.shape[1], tr.x.shape[2], n_classes, config.dropout_rate, rng)
    params.set_normalizer(fd.normalizer.mean, fd.normalizer.std)
    return trainer.train(params, tr, va, config.replace(seed=config.seed * 1009 + fold))


def _slice_predict(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, nnmodel.ModelParams):
        return nnmodel.predict_proba(model, x).argmax(axis=1)
    return model.predict_slices(x)


def run_fold(samples: list[data.MinuteSample], recordings: dict[str, Recording], plan: data.FoldPlan, fold: int,
             categories: list[int], spec: ModelSpec, config: trainer.TrainConfig, consensus_k: int = consensus.DEFAULT_K,
             granularity: str = "minute", keep_model: bool = False) -> FoldResult:
    """Train on one fold and score its held-out units at slice and consensus level."""
    C = len(categories)
    fd = data.materialize_fold(samples, plan, fold, config.seq_length_s, seed=config.seed)
    tr, va, te = (data.stack_slices(s, config.seq_length_s, categories) for s in (fd.train, fd.val, fd.test))
    model, report = _fit(spec, fd, tr, va, C, config, fold)
    preds = _slice_predict(model, te.x)
    ids, cpreds, ctruths, fracs = [], [], [], []
    for i, (uid, unit) in enumerate(consensus_units(fd.test, recordings, granularity)):
        label = unit.label if isinstance(unit, data.MinuteSample) else unit.pain_score
        winner, tally = consensus.consensus_predict(model, unit, consensus_k, [config.seed, fold, i], C,
                                                    config.seq_length_s)
        ids.append(uid)
        cpreds.append(winner)
        ctruths.append(categories.index(label))
        fracs.append(tally.fractions())
    log.info("fold %d: slice accuracy %.4f, consensus accuracy %.4f", fold, float(np.mean(preds == te.y)),
             float(np.mean(np.equal(cpreds, ctruths))))
    return FoldResult(fold, preds, te.y, ids, cpreds, ctruths, np.array(fracs),
                      model if keep_model else None, report)


def run_protocol(recordings: list[Recording], categories: list[int], protocol: str = "fivefold",
                 spec: ModelSpec | None = None, config: trainer.TrainConfig | None = None, folds=None,
                 consensus_k: int = consensus.DEFAULT_K, granularity: str = "minute",
                 keep_models: bool = False) -> ProtocolResult:
    """Cross-validate ``spec`` under ``protocol``; ``folds`` restricts the run to a subset of fold indices."""
    spec = spec or ModelSpec()
    config = config or trainer.TrainConfig()
    samples = [s for r in recordings for s in data.split_minutes(r)]
    plan = data.make_folds(recordings, protocol)
    issues = plan.check_partition(sorted({data.unit_of(s, plan.protocol) for s in samples}))
    if issues:
        raise UsageError("; ".join(issues))
    fold_ids = range(plan.n_folds) if folds is None else list(folds)
    by_id = {r.id: r for r in recordings}
    result = ProtocolResult(plan.protocol, list(categories))
    for f in fold_ids:
        if not 0 <= f < plan.n_folds:
            raise UsageError(f"fold {f} outside [0, {plan.n_folds - 1}]")
        result.folds.append(run_fold(samples, by_id, plan, f, list(categories), spec, config, consensus_k,
                                     granularity, keep_models))
    return result


def sensor_ablation(recordings: list[Recording], categories: list[int], spec: ModelSpec | None = None,
                    config: trainer.TrainConfig | None = None, protocol: str = "fivefold", folds=None):
    """Retrain from scratch on each single channel; rows ``(channel, kind, accuracy)`` sorted by accuracy, descending.

    Ties keep channel order. Consensus is skipped (k=1) since only slice accuracy is tabulated.
    """
    spec = spec or ModelSpec()
    channels = recordings[0].channels
    rows = []
    for c, ch in enumerate(channels):
        view = [r.select([c]) for r in recordings]
        res = run_protocol(view, categories, protocol, spec, config, folds, consensus_k=1)
        acc = float(np.mean([f.slice_accuracy for f in res.folds]))
        log.info("ablation %s (%s): %.4f", ch.name, ch.kind, acc)
        rows.append((ch.name, ch.kind, acc))
    order = sorted(range(len(rows)), key=lambda i: (-rows[i][2], i))
    return [rows[i] for i in order]


def seqlen_sweep(recordings: list[Recording], categories: list[int], lengths, spec: ModelSpec | None = None,
                 config: trainer.TrainConfig | None = None, protocol: str = "fivefold", folds=None):
    """Full cross-validated run per slice length (seconds); rows ``(length, slices_per_minute, accuracy)``."""
    config = config or trainer.TrainConfig()
    rows = []
    for length in lengths:
        if not 0 < length <= 60:
            raise UsageError(f"slice length {length} s does not fit a one-minute sample")
        res = run_protocol(recordings, categories, protocol, spec, config.replace(seq_length_s=float(length)),
                           folds, consensus_k=1)
        period = recordings[0].sample_period_ms
        per_min = data.samples_per_minute(period) // data.slice_len(length, period)
        rows.append((float(length), per_min, res.slice_accuracy))
    return rows


def write_table(rows, header, path) -> None:
    lines = [",".join(header)] + [",".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
