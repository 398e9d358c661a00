"""Fixed-family sensor-grid CNN and dense MLP with exact reverse-mode gradients.

A batch may be processed as a list of sub-batches ("chunks"). Every
per-example operation runs chunk by chunk (optionally on a thread pool);
batch-normalization statistics and parameter gradients are reduced across
chunks in ascending chunk order. The result therefore does not depend on
how the batch was split, which is what the data-parallel trainer relies on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from painmeter.nn import kernels, ops
from painmeter.nn.kernels import ShapeError
from painmeter.nn.ops import UsageError

MIN_CONV_LAYERS = 2
MAX_CONV_LAYERS = 5


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor shared by checkpoints, initialization and the forward pass."""

    kind: str  # "cnn" or "mlp"
    n_channels: int
    seq_len: int
    n_classes: int
    conv_filters: tuple[int, ...] = (16, 16)
    conv_windows: tuple[tuple[int, int], ...] = ((3, 25), (1, 9))
    pool_window: tuple[int, int] = (1, 4)
    hidden: tuple[int, ...] = (64,)
    dropout: float = 0.5

    def __post_init__(self):
        # normalize lists coming from JSON into hashable tuples
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "conv_windows", tuple((int(s), int(t)) for s, t in self.conv_windows))
        object.__setattr__(self, "pool_window", tuple(int(p) for p in self.pool_window))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("cnn", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two categories")
        if self.n_channels < 1 or self.seq_len < 1:
            raise ShapeError("input grid must be non-empty")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.kind == "mlp":
            return
        if not MIN_CONV_LAYERS <= len(self.conv_filters) <= MAX_CONV_LAYERS:
            raise ValueError(f"conv layer count must be in [{MIN_CONV_LAYERS}, {MAX_CONV_LAYERS}]")
        if len(self.conv_windows) != len(self.conv_filters):
            raise ValueError("one window per conv layer required")
        self.conv_shapes()

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """(maps, rows, cols) entering each conv layer; raises if a window does not fit."""
        shapes = []
        maps, rows, cols = 1, self.n_channels, self.seq_len
        ph, pw = self.pool_window
        for k, (f, (s, t)) in enumerate(zip(self.conv_filters, self.conv_windows)):
            shapes.append((maps, rows, cols))
            if s > rows or t > cols:
                raise ShapeError(f"conv layer {k}: window {(s, t)} does not fit input {(rows, cols)}")
            maps, rows, cols = f, rows - s + 1, cols - t + 1
            if k < len(self.conv_filters) - 1:
                if ph > rows or pw > cols:
                    raise ShapeError(f"pool after conv layer {k} does not fit {(rows, cols)}")
                rows, cols = (rows - ph) // ph + 1, (cols - pw) // pw + 1
        return shapes

    @property
    def n_dense(self) -> int:
        return len(self.hidden) + 1

    @property
    def feature_len(self) -> int:
        if self.kind == "cnn":
            return self.conv_filters[-1]
        return self.n_channels * self.seq_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def cnn_architecture(n_channels: int, seq_len: int, n_classes: int, n_conv: int = 2, filters: int = 16,
                     first_window=(3, 25), deep_window=(1, 9), pool=(1, 4), hidden=(64,),
                     dropout: float = 0.5) -> Architecture:
    """Default sensor-grid CNN; the first window is clipped to the sensor count."""
    s, t = first_window
    windows = [(min(s, n_channels), t)] + [tuple(deep_window)] * (n_conv - 1)
    return Architecture("cnn", n_channels, seq_len, n_classes, (filters,) * n_conv, tuple(windows),
                        tuple(pool), tuple(hidden), dropout)


def mlp_architecture(n_channels: int, seq_len: int, n_classes: int, hidden=(256, 128, 64),
                     dropout: float = 0.5) -> Architecture:
    return Architecture("mlp", n_channels, seq_len, n_classes, (), (), (1, 1), tuple(hidden), dropout)


@dataclass
class ModelParams:
    """Trainable tensors plus non-trainable buffers (batch-norm running stats, input scaling)."""

    arch: Architecture
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def set_normalizer(self, mean, std) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != (self.arch.n_channels,) or std.shape != mean.shape:
            raise ShapeError("normalizer must have one entry per channel")
        self.buffers["input.mean"] = mean.copy()
        self.buffers["input.std"] = std.copy()

    def equal(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of architecture and every array."""
        if self.arch != other.arch:
            return False
        for mine, theirs in ((self.tensors, other.tensors), (self.buffers, other.buffers)):
            if mine.keys() != theirs.keys():
                return False
            if any(not np.array_equal(mine[k], theirs[k]) for k in mine):
                return False
        return True


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """He-uniform weights by fan-in, zero biases, unit batch-norm scale.

    The output layer is scaled down by 10 so a fresh model starts close to the
    uniform distribution over categories.
    """
    tensors: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {
        "input.mean": np.zeros(arch.n_channels),
        "input.std": np.ones(arch.n_channels),
    }
    if arch.kind == "cnn":
        for k, ((fin, _, _), f, (s, t)) in enumerate(zip(arch.conv_shapes(), arch.conv_filters, arch.conv_windows)):
            lim = np.sqrt(6.0 / (fin * s * t))
            tensors[f"conv{k}.w"] = rng.uniform(-lim, lim, size=(f, fin, s, t))
            tensors[f"conv{k}.b"] = np.zeros(f)
            tensors[f"conv{k}.gamma"] = np.ones(f)
            tensors[f"conv{k}.beta"] = np.zeros(f)
            buffers[f"conv{k}.mean"] = np.zeros(f)
            buffers[f"conv{k}.var"] = np.ones(f)
    widths = [arch.feature_len, *arch.hidden, arch.n_classes]
    for k, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        lim = np.sqrt(6.0 / fin)
        if k == len(widths) - 2:
            lim *= 0.1
        tensors[f"dense{k}.w"] = rng.uniform(-lim, lim, size=(fout, fin))
        tensors[f"dense{k}.b"] = np.zeros(fout)
    return ModelParams(arch, tensors, buffers)


# -- forward / backward -------------------------------------------------------------

def split_batch(x: np.ndarray, parts: int) -> list[np.ndarray]:
    if parts < 1 or x.shape[0] % parts:
        raise UsageError(f"batch of {x.shape[0]} cannot be split evenly into {parts} parts")
    return list(np.split(x, parts))


def _map(fn, executor, *iterables):
    if executor is None:
        return [fn(*args) for args in zip(*iterables)]
    return list(executor.map(fn, *iterables))


@dataclass
class ForwardCache:
    mode: str
    sizes: list[int]
    layers: list[dict]
    dense: list[dict]
    new_buffers: dict[str, np.ndarray]


def draw_dropout_masks(arch: Architecture, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [ops.dropout_mask((batch, h), arch.dropout, rng) for h in arch.hidden]


def forward_chunks(params: ModelParams, chunks: list[np.ndarray], mode: str = "infer",
                   masks: list[np.ndarray] | None = None, executor=None, keep_cache: bool = True):
    """Logits for each chunk and the cache needed by :func:`backward_chunks`.

    In train mode batch-norm uses pooled statistics of all chunks and the
    updated running statistics are returned in ``cache.new_buffers`` (the
    parameters are not modified).
    """
    if mode not in ("train", "infer"):
        raise UsageError(f"unknown mode {mode!r}")
    arch = params.arch
    P, B = params.tensors, params.buffers
    sizes = [c.shape[0] for c in chunks]
    for c in chunks:
        if c.ndim != 3 or c.shape[1:] != (arch.n_channels, arch.seq_len):
            raise ShapeError(f"expected input (batch, {arch.n_channels}, {arch.seq_len}), got {c.shape}")
    mean = B["input.mean"][None, :, None]
    std = B["input.std"][None, :, None]
    hs = [(c - mean) / std for c in chunks]
    layers: list[dict] = []
    new_buffers: dict[str, np.ndarray] = {}

    if arch.kind == "cnn":
        hs = [h[:, None] for h in hs]
        n_conv = len(arch.conv_filters)
        for k in range(n_conv):
            w, b = P[f"conv{k}.w"], P[f"conv{k}.b"]
            gamma, beta = P[f"conv{k}.gamma"], P[f"conv{k}.beta"]
            zs = _map(lambda h: kernels.conv2d_forward(h, w, b), executor, hs)
            if mode == "train":
                count = sum(z.size // z.shape[1] for z in zs)
                mu = _ordered_sum(_map(kernels.channel_sums, executor, zs)) / count
                var = _ordered_sum(_map(lambda z: kernels.channel_sqdev(z, mu), executor, zs)) / count
                m = ops.BN_MOMENTUM
                new_buffers[f"conv{k}.mean"] = m * B[f"conv{k}.mean"] + (1 - m) * mu
                new_buffers[f"conv{k}.var"] = m * B[f"conv{k}.var"] + (1 - m) * var
            else:
                mu, var, count = B[f"conv{k}.mean"], B[f"conv{k}.var"], None
            inv = 1.0 / np.sqrt(var + ops.BN_EPS)
            window = None if k == n_conv - 1 else arch.pool_window
            results = _map(lambda z: kernels.bn_relu_pool_forward(z, mu, inv, gamma, beta, window), executor, zs)
            layers.append({"inputs": hs if keep_cache else None, "mu": mu, "inv": inv, "count": count,
                           "z": zs if keep_cache else None, "idx": [r[1] for r in results]})
            del zs
            hs = [r[0] for r in results]
    else:
        hs = [h.reshape(h.shape[0], -1) for h in hs]

    if mode == "train" and arch.dropout > 0 and masks is None:
        raise UsageError("train mode with dropout needs dropout masks")
    offsets = np.cumsum([0] + sizes)
    dense: list[dict] = []
    n_dense = arch.n_dense
    for k in range(n_dense):
        w, b = P[f"dense{k}.w"], P[f"dense{k}.b"]
        pre = [h @ w.T + b for h in hs]
        if k == n_dense - 1:
            dense.append({"inputs": hs})
            hs = pre
            break
        gates = [p > 0 for p in pre]
        acts = [np.where(g, p, 0.0) for g, p in zip(gates, pre)]
        if mode == "train" and arch.dropout > 0:
            drop = [masks[k][offsets[i]:offsets[i + 1]] for i in range(len(sizes))]
            acts = [a * d for a, d in zip(acts, drop)]
        else:
            drop = None
        dense.append({"inputs": hs, "gates": gates, "drop": drop})
        hs = acts
    cache = ForwardCache(mode, sizes, layers, dense, new_buffers) if keep_cache else None
    return hs, cache


def backward_chunks(params: ModelParams, cache: ForwardCache | None, dlogits: list[np.ndarray],
                    executor=None) -> dict[str, np.ndarray]:
    """Parameter gradients, summed over chunks in ascending order."""
    if cache is None or not cache.dense:
        raise UsageError("backward requires the cache of a preceding forward pass")
    arch = params.arch
    P = params.tensors
    if [d.shape[0] for d in dlogits] != cache.sizes:
        raise ShapeError("output gradient does not match the forward batch")
    grads: dict[str, np.ndarray] = {}
    ds = [np.asarray(d, dtype=np.float64) for d in dlogits]
    for k in reversed(range(arch.n_dense)):
        layer = cache.dense[k]
        w = P[f"dense{k}.w"]
        if k < arch.n_dense - 1:
            if layer["drop"] is not None:
                ds = [d * m for d, m in zip(ds, layer["drop"])]
            ds = [d * g for d, g in zip(ds, layer["gates"])]
        grads[f"dense{k}.w"] = _ordered_sum(d.T @ h for d, h in zip(ds, layer["inputs"]))
        grads[f"dense{k}.b"] = _ordered_sum(d.sum(axis=0) for d in ds)
        if k > 0 or arch.kind == "cnn":
            ds = [d @ w for d in ds]

    if arch.kind == "cnn":
        n_conv = len(arch.conv_filters)
        for k in reversed(range(n_conv)):
            layer = cache.layers[k]
            if layer["z"] is None:
                raise UsageError("forward pass was run without keeping intermediates")
            mu, inv = layer["mu"], layer["inv"]
            gamma, beta = P[f"conv{k}.gamma"], P[f"conv{k}.beta"]
            stats = _map(lambda d, i, z: kernels.bn_relu_pool_stats(d, i, z, mu, inv, gamma, beta),
                         executor, ds, layer["idx"], layer["z"])
            dbeta = _ordered_sum(st[1] for st in stats)
            dgamma = _ordered_sum(st[2] for st in stats)
            train = cache.mode == "train"
            dzs = _map(lambda st, i, z: kernels.bn_relu_pool_input_grad(st[0], i, z, mu, inv, gamma, dbeta, dgamma,
                                                                        layer["count"], train),
                       executor, stats, layer["idx"], layer["z"])
            grads[f"conv{k}.gamma"] = dgamma
            grads[f"conv{k}.beta"] = dbeta
            w = P[f"conv{k}.w"]
            res = _map(lambda h, dz: kernels.conv2d_backward(h, w, dz, need_input_grad=k > 0),
                       executor, layer["inputs"], dzs)
            grads[f"conv{k}.w"] = _ordered_sum(r[1] for r in res)
            grads[f"conv{k}.b"] = _ordered_sum(r[2] for r in res)
            ds = [r[0] for r in res]
    return {name: grads[name] for name in P}


def _ordered_sum(parts):
    total = None
    for p in parts:
        total = p.copy() if total is None else total + p
    return total


# -- single-batch conveniences ----------------------------------------------------------

def model_forward(x, params: ModelParams, mode: str = "infer", rng: np.random.Generator | None = None):
    """Probability vectors for a batch ``(B, N, L)`` or one slice ``(N, L)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    masks = None
    if mode == "train" and params.arch.dropout > 0:
        if rng is None:
            raise UsageError("train mode with dropout needs a random generator")
        masks = draw_dropout_masks(params.arch, x.shape[0], rng)
    logits, _ = forward_chunks(params, [x], mode, masks, keep_cache=False)
    p = ops.softmax(logits[0])
    return p[0] if single else p


def predict_proba(params: ModelParams, x: np.ndarray, batch: int = 16) -> np.ndarray:
    """Inference-mode probabilities for many slices, evaluated in blocks."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], params.arch.n_classes))
    for i in range(0, x.shape[0], batch):
        logits, _ = forward_chunks(params, [x[i:i + batch]], "infer", keep_cache=False)
        out[i:i + batch] = ops.softmax(logits[0])
    return out


def apply_buffers(params: ModelParams, cache: ForwardCache) -> None:
    """Commit running statistics gathered by a train-mode forward pass."""
    params.buffers.update({k: v.copy() for k, v in cache.new_buffers.items()})
