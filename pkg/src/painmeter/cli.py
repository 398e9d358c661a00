"""Command-line entry point: ``painmeter <command> ...``.

Every command writes into a run directory (``--out``): its outputs, a
``run.log`` with the full configuration and seed, and ``outputs.txt``
listing each produced file with its SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from painmeter import consensus, data, experiments, metrics, synth, trainer
from painmeter.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from painmeter.nn.ops import UsageError
from painmeter.signal_store import DataError, FormatError, ManifestError, load_manifest, validate_manifest

log = logging.getLogger("painmeter")


class Run:
    """Run directory with a log file and a manifest of produced files."""

    def __init__(self, out, command: str, args: argparse.Namespace):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.handler = logging.FileHandler(self.dir / "run.log", mode="w", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(self.handler)
        log.info("command=%s", command)
        for k, v in sorted(vars(args).items()):
            if k != "func":
                log.info("arg %s=%s", k, v)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def close(self) -> None:
        lines = []
        for name in self.files:
            digest = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
            lines.append(f"{name}\t{digest}")
        (self.dir / "outputs.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        logging.getLogger().removeHandler(self.handler)
        self.handler.close()


def _csv_list(text: str, typ=int):
    try:
        return [typ(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None


def _load_data(path):
    manifest = load_manifest(path)
    issues = validate_manifest(manifest)
    if issues:
        raise DataError("invalid dataset: " + "; ".join(issues))
    return manifest, manifest.load_all()


def _config(args) -> trainer.TrainConfig:
    cfg = trainer.PRESETS[args.preset]
    if args.config:
        cfg = trainer.load_config(args.config, cfg)
    changes = {k: getattr(args, k) for k in ("seed", "max_steps", "learning_rate", "seq_length_s")
               if getattr(args, k, None) is not None}
    cfg = cfg.replace(**changes)
    log.info("config:\n%s", cfg.to_text().rstrip())
    return cfg


def _fold_list(args):
    return None if args.fold is None else [args.fold]


def _spec(args) -> experiments.ModelSpec:
    return experiments.ModelSpec(args.model, filters=args.filters)


# -- commands ------------------------------------------------------------------------

def cmd_synth(args, run: Run) -> int:
    spec = synth.PRESETS[args.preset](args.seed)
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        try:
            overrides[key] = int(value)
        except ValueError:
            overrides[key] = float(value)
    if overrides:
        spec = spec.with_(**overrides)
    log.info("synth spec: %s", spec)
    manifest, recs, _ = synth.generate(spec, run.dir)
    run.files += ["manifest.txt", "ground_truth.csv", *manifest.recording_paths]
    print(f"wrote {len(recs)} recordings to {run.dir}")
    return 0


def _write_fold_outputs(run: Run, res: experiments.ProtocolResult, categories) -> metrics.MetricsReport:
    with open(run.path("predictions.csv"), "w", encoding="utf-8") as fh:
        fh.write("fold,prediction,truth\n")
        for f in res.folds:
            fh.writelines(f"{f.fold},{p},{t}\n" for p, t in zip(f.slice_preds, f.slice_truths))
    with open(run.path("consensus.csv"), "w", encoding="utf-8") as fh:
        fh.write("fold,unit,prediction,truth," + ",".join(f"fraction_{c}" for c in categories) + "\n")
        for f in res.folds:
            for u, p, t, fr in zip(f.unit_ids, f.consensus_preds, f.consensus_truths, f.consensus_fractions):
                fh.write(f"{f.fold},{u},{p},{t}," + ",".join(repr(float(v)) for v in fr) + "\n")
    run.path("folds.csv").write_text(res.fold_table(), encoding="utf-8")
    rep = res.report()
    rep.save(run.path("metrics.txt"))
    return rep


def cmd_train(args, run: Run) -> int:
    manifest, recs = _load_data(args.data)
    cfg = _config(args)
    spec = _spec(args)
    plan = data.make_folds(recs, args.folds)
    plan.save(run.path("folds.txt"))
    res = experiments.run_protocol(recs, manifest.category_values, args.folds, spec, cfg, _fold_list(args),
                                   args.consensus, args.granularity, keep_models=True)
    for f in res.folds:
        if f.train_report is not None:
            save_checkpoint(f.model, run.path(f"fold{f.fold}.ckpt"), {"fold": f.fold, "seed": cfg.seed})
            run.path(f"fold{f.fold}_train.csv").write_text(f.train_report.to_text(), encoding="utf-8")
    rep = _write_fold_outputs(run, res, manifest.category_values)
    print(f"slice_accuracy={rep.slice_accuracy:.4f} consensus_accuracy={rep.consensus_accuracy:.4f}")
    return 0


def _eval_samples(args, recs):
    samples = [s for r in recs for s in data.split_minutes(r)]
    if args.fold is None:
        return samples
    plan = data.make_folds(recs, args.folds)
    test = set(plan.test_units(args.fold))
    return [s for s in samples if data.unit_of(s, plan.protocol) in test]


def cmd_eval(args, run: Run) -> int:
    manifest, recs = _load_data(args.data)
    params, meta = load_checkpoint(args.checkpoint)
    log.info("checkpoint meta: %s", meta)
    cats = manifest.category_values
    samples = _eval_samples(args, recs)
    seq = params.arch.seq_len * recs[0].sample_period_ms / 1000.0
    slices = data.stack_slices(samples, seq, cats)
    ev = trainer.evaluate(params, slices)
    cpreds = ctruths = fracs = None
    if args.consensus:
        units = experiments.consensus_units(samples, {r.id: r for r in recs}, args.granularity)
        cpreds, ctruths, fracs = [], [], []
        for i, (_, unit) in enumerate(units):
            label = unit.label if isinstance(unit, data.MinuteSample) else unit.pain_score
            w, tally = consensus.consensus_predict(params, unit, args.consensus, [args.seed, i], len(cats), seq)
            cpreds.append(w)
            ctruths.append(cats.index(label))
            fracs.append(tally.fractions())
    rep = metrics.build_report(cats, ev.predictions, slices.y, cpreds, ctruths, fracs)
    rep.save(run.path("metrics.txt"))
    print(rep.to_text(), end="")
    return 0


def cmd_consensus(args, run: Run) -> int:
    manifest, recs = _load_data(args.data)
    params, _ = load_checkpoint(args.checkpoint)
    cats = manifest.category_values
    samples = _eval_samples(args, recs)
    units = experiments.consensus_units(samples, {r.id: r for r in recs}, args.granularity)
    labels = [cats.index(u.label if isinstance(u, data.MinuteSample) else u.pain_score) for _, u in units]
    seq = params.arch.seq_len * recs[0].sample_period_ms / 1000.0
    rows, _ = consensus.consensus_curve(params, [u for _, u in units], labels, args.k, args.seed, len(cats), seq)
    consensus.write_curve(rows, run.path("consensus_curve.csv"))
    for k, acc in rows:
        print(f"k={k} accuracy={acc:.4f}")
    return 0


def cmd_ablate(args, run: Run) -> int:
    manifest, recs = _load_data(args.data)
    rows = experiments.sensor_ablation(recs, manifest.category_values, _spec(args), _config(args), args.folds,
                                       _fold_list(args))
    experiments.write_table(rows, ("channel", "kind", "accuracy"), run.path("ablation.csv"))
    for name, kind, acc in rows:
        print(f"{name} ({kind}): {acc:.4f}")
    return 0


def cmd_sweep(args, run: Run) -> int:
    manifest, recs = _load_data(args.data)
    rows = experiments.seqlen_sweep(recs, manifest.category_values, args.lengths, _spec(args), _config(args),
                                    args.folds, _fold_list(args))
    experiments.write_table(rows, ("seq_length_s", "slices_per_minute", "accuracy"), run.path("seqlen_sweep.csv"))
    for length, n, acc in rows:
        print(f"{length:g}s ({n} slices/minute): {acc:.4f}")
    return 0


def _read_csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return lines[0].split(","), [ln.split(",") for ln in lines[1:] if ln]


def cmd_report(args, run: Run) -> int:
    """Rebuild the metrics report of a finished ``train`` run from its prediction files."""
    src = Path(args.run)
    manifest, _ = _load_data(args.data) if args.data else (None, None)
    _, rows = _read_csv(src / "predictions.csv")
    header, crows = _read_csv(src / "consensus.csv")
    fraction_cols = [h for h in header if h.startswith("fraction_")]
    cats = [int(h.split("_", 1)[1]) for h in fraction_cols]
    if manifest is not None and manifest.category_values != cats:
        raise UsageError("run categories do not match the dataset")
    rep = metrics.build_report(cats, [int(r[1]) for r in rows], [int(r[2]) for r in rows],
                               [int(r[2]) for r in crows], [int(r[3]) for r in crows],
                               np.array([[float(v) for v in r[4:]] for r in crows]))
    rep.save(run.path("metrics.txt"))
    print(rep.to_text(), end="")
    return 0


# -- parser --------------------------------------------------------------------------

def _add_data(p, folds=True):
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    if folds:
        p.add_argument("--folds", default="fivefold", choices=sorted(data.PROTOCOL_ALIASES))
        p.add_argument("--fold", type=int, default=None, help="single fold index (default: all folds)")


def _add_train(p):
    p.add_argument("--model", default="cnn", choices=experiments.MODEL_KINDS)
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--preset", default="default", choices=sorted(trainer.PRESETS))
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--seq-length", dest="seq_length_s", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="painmeter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", default="dataset1", choices=sorted(synth.PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a numeric generator setting")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training")
    _add_data(p)
    _add_train(p)
    p.add_argument("--consensus", type=int, default=consensus.DEFAULT_K, help="slices per consensus vote")
    p.add_argument("--granularity", default="minute", choices=experiments.GRANULARITIES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--consensus", type=int, default=0, help="slices per consensus vote (0 disables)")
    p.add_argument("--granularity", default="minute", choices=experiments.GRANULARITIES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("consensus", help="consensus accuracy as a function of k")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=_csv_list, default=[1, 5, 10, 25, 50, 100])
    p.add_argument("--granularity", default="minute", choices=experiments.GRANULARITIES)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("ablate", help="single-channel retraining")
    _add_data(p)
    _add_train(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-seqlen", help="accuracy per slice length")
    _add_data(p)
    _add_train(p)
    p.add_argument("--lengths", type=lambda s: _csv_list(s, float), default=[5.0, 15.0, 30.0, 60.0])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild metrics from a train run")
    p.add_argument("--run", required=True, help="directory of a finished train run")
    p.add_argument("--data", help="dataset to cross-check categories against")
    p.set_defaults(func=cmd_report)

    for name, sp in sub.choices.items():
        sp.add_argument("--out", default=f"runs/{name}", help="run directory")
        sp.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit with status 2
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    root.addHandler(console)
    run = Run(args.out, args.command, args)
    try:
        return args.func(args, run)
    except (UsageError, DataError, FormatError, ManifestError, CheckpointError, data.LengthError,
            trainer.TrainingError, ValueError, OSError) as e:
        log.error("%s", e)
        print(f"painmeter {args.command}: error: {e}", file=sys.stderr)
        return 1
    finally:
        run.close()
        root.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
