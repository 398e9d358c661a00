"""Mini-batch Adam training with early stopping and data-parallel gradients."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from painmeter import ordinal
from painmeter.data import SliceSet
from painmeter.nn import model as nnmodel
from painmeter.nn.model import ModelParams
from painmeter.nn.ops import UsageError, softmax
from painmeter.nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 24
    max_epochs: int = 2000
    dropout_rate: float = 0.5
    seq_length_s: float = 15.0
    learning_rate: float = 1e-3
    patience_validations: int = 100
    validation_every_steps: int = 10
    seed: int = 0
    workers: int = 1
    max_steps: int = 0  # 0 means no cap beyond max_epochs

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.workers < 1 or self.batch_size % self.workers:
            raise ValueError(f"batch_size {self.batch_size} must be divisible by workers {self.workers}")
        if self.patience_validations < 1:
            raise ValueError("patience_validations must be >= 1")
        if self.validation_every_steps < 1:
            raise ValueError("validation_every_steps must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


PRESETS = {
    "default": TrainConfig(),
    # Adam step size 0.5 over 2000 epochs; diverges easily, kept for comparison runs
    "large-step": TrainConfig(learning_rate=0.5),
}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(types[key], value)
    return (base or TrainConfig()).replace(**changes)


def _coerce(typ, value: str):
    if typ in (int, "int"):
        return int(value)
    return float(value)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    val_curve: list[tuple[int, int, float]] = field(default_factory=list)  # (index, step, accuracy)
    stop_step: int = 0
    stop_reason: str = ""
    best_step: int = 0
    best_val_accuracy: float = float("-inf")

    def to_text(self) -> str:
        out = [f"# stop_step={self.stop_step} stop_reason={self.stop_reason} "
               f"best_step={self.best_step} best_val_accuracy={self.best_val_accuracy!r}",
               "kind,index,step,value"]
        out += [f"loss,{i},{s},{v!r}" for i, (s, v) in enumerate(self.loss_curve)]
        out += [f"val,{i},{s},{v!r}" for i, s, v in self.val_curve]
        return "\n".join(out) + "\n"


@dataclass
class EvalResult:
    predictions: np.ndarray
    probs: np.ndarray
    accuracy: float


def evaluate(params: ModelParams, slices: SliceSet, batch: int = 16) -> EvalResult:
    """Inference-mode predictions and slice accuracy."""
    probs = nnmodel.predict_proba(params, slices.x, batch)
    pred = probs.argmax(axis=1)
    acc = float(np.mean(pred == slices.y)) if len(pred) else float("nan")
    return EvalResult(pred, probs, acc)


def parallel_gradient_step(params: ModelParams, x: np.ndarray, y: np.ndarray, workers: int = 1,
                           masks: list[np.ndarray] | None = None, executor=None):
    """Mean-loss gradient of one batch computed as ``workers`` equal sub-batches.

    Every worker sees the same parameter snapshot; batch-norm statistics and
    per-worker gradients are reduced in ascending worker order. Returns
    ``(grads, loss, new_buffers)``.
    """
    if workers < 1 or x.shape[0] % workers:
        raise UsageError(f"batch of {x.shape[0]} is not divisible by {workers} workers")
    B = x.shape[0]
    chunks = nnmodel.split_batch(x, workers)
    ys = np.split(np.asarray(y), workers)
    logits, cache = nnmodel.forward_chunks(params, chunks, "train", masks, executor)
    losses, dlogits = [], []
    for lg, yc in zip(logits, ys):
        p = softmax(lg)
        loss, g = ordinal.mean_loss_and_grad(p, yc, batch_size=B)
        losses.append(loss)
        dlogits.append(g)
    grads = nnmodel.backward_chunks(params, cache, dlogits, executor)
    total = 0.0
    for v in losses:
        total += v
    return grads, total, cache.new_buffers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    if n < batch_size:
        return [perm]
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def train(params: ModelParams, train_set: SliceSet, val_set: SliceSet, config: TrainConfig,
          progress=None) -> tuple[ModelParams, TrainReport]:
    """Shuffled mini-batch Adam on the mean ordinal loss with validation-based early stopping.

    Returns the parameters with the best validation accuracy seen (strict
    improvement only) and the training report.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise UsageError("training and validation sets must be non-empty")
    C = params.arch.n_classes
    for s in (train_set, val_set):
        if s.y.min() < 0 or s.y.max() >= C:
            raise UsageError(f"labels outside the model's {C} categories")
    if params.arch.dropout != config.dropout_rate:
        params = nnmodel.ModelParams(nnmodel.Architecture(**{**params.arch.to_dict(), "dropout": config.dropout_rate}),
                                     params.tensors, params.buffers)
    params = params.copy()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    state = AdamState.for_params(params.tensors, lr=config.learning_rate)
    report = TrainReport()
    best = params.copy()
    stale = 0
    step = 0
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    workers = config.workers

    def validate():
        nonlocal best, stale
        acc = evaluate(params, val_set).accuracy
        report.val_curve.append((len(report.val_curve), step, acc))
        if acc > report.best_val_accuracy:
            report.best_val_accuracy, report.best_step = acc, step
            best = params.copy()
            stale = 0
        else:
            stale += 1
        if progress:
            progress(step, report.loss_curve[-1][1] if report.loss_curve else float("nan"), acc)
        return stale >= config.patience_validations

    try:
        for _ in range(config.max_epochs):
            for idx in _batches(len(train_set), config.batch_size, shuffle_rng):
                xb, yb = train_set.x[idx], train_set.y[idx]
                masks = None
                if params.arch.dropout > 0:
                    masks = nnmodel.draw_dropout_masks(params.arch, len(idx), dropout_rng)
                w = workers if len(idx) % workers == 0 else 1
                grads, loss, new_buffers = parallel_gradient_step(params, xb, yb, w, masks, executor)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at step {step}")
                params.tensors, state = adam_step(params.tensors, grads, state)
                params.buffers.update(new_buffers)
                step += 1
                report.loss_curve.append((step, loss))
                if step % config.validation_every_steps == 0 and validate():
                    report.stop_step, report.stop_reason = step, "early_stop"
                    return best, report
                if config.max_steps and step >= config.max_steps:
                    if not report.val_curve or report.val_curve[-1][1] != step:
                        validate()
                    report.stop_step, report.stop_reason = step, "max_steps"
                    return best, report
        if not report.val_curve or report.val_curve[-1][1] != step:
            validate()
        report.stop_step, report.stop_reason = step, "max_epochs"
        return best, report
    finally:
        if executor is not None:
            executor.shutdown()
