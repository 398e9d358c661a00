"""Finite-difference cases shared by the unit tests and the acceptance suite.

Each case builds a small random instance from a seed and returns the worst
relative error between analytic and central-difference gradients.
"""

import numpy as np

from painmeter import ordinal
from painmeter.nn import kernels, ops
from painmeter.nn import model as nnmodel
from painmeter.nn.gradcheck import max_relative_error


def conv_case(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 12))
    w = rng.standard_normal((3, 2, 2, 5))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 3, 8))
    f = lambda: float((r * kernels.conv2d_forward(x, w, b)).sum())  # noqa: E731
    dx, dw, db = kernels.conv2d_backward(x, w, r)
    return max_relative_error(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})[0]


def batchnorm_case(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3, 2, 4)) * 2 + 1
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    r = rng.standard_normal(x.shape)
    f = lambda: float((r * ops.batchnorm_forward(x, gamma, beta, "train")[0]).sum())  # noqa: E731
    _, _, cache = ops.batchnorm_forward(x, gamma, beta, "train")
    dx, dg, db = ops.batchnorm_backward(r, cache)
    return max_relative_error(f, {"x": x, "gamma": gamma, "beta": beta}, {"x": dx, "gamma": dg, "beta": db})[0]


def fused_bn_pool_case(seed):
    """Batch norm, ReLU and max pooling as fused in the CNN layers."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, 2, 2, 12))
    gamma, beta = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2) * 0.3
    count = z.size // 2

    def forward():
        mu = kernels.channel_sums(z) / count
        var = kernels.channel_sqdev(z, mu) / count
        inv = 1.0 / np.sqrt(var + ops.BN_EPS)
        return (mu, inv) + kernels.bn_relu_pool_forward(z, mu, inv, gamma, beta, (1, 3))

    mu, inv, out, idx = forward()
    r = rng.standard_normal(out.shape)
    f = lambda: float((r * forward()[2]).sum())  # noqa: E731
    du, s1, s2 = kernels.bn_relu_pool_stats(r, idx, z, mu, inv, gamma, beta)
    dz = kernels.bn_relu_pool_input_grad(du, idx, z, mu, inv, gamma, s1, s2, count, True)
    return max_relative_error(f, {"z": z, "gamma": gamma, "beta": beta}, {"z": dz, "gamma": s2, "beta": s1})[0]


def softmax_ordinal_case(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 8))
    logits = rng.standard_normal((4, C)) * 2
    y = rng.integers(0, C, 4)
    f = lambda: ordinal.mean_loss_and_grad(ops.softmax(logits), y)[0]  # noqa: E731
    g = ordinal.mean_loss_and_grad(ops.softmax(logits), y)[1]
    return max_relative_error(f, {"logits": logits}, {"logits": g})[0]


def _model_case(arch, seed, mode="train", batch=3):
    rng = np.random.default_rng(seed)
    p = nnmodel.init_params(arch, rng)
    for k in p.tensors:
        # move scale/shift/bias parameters off their init values
        if k.endswith((".gamma", ".beta", ".b")):
            p.tensors[k] = p.tensors[k] + rng.normal(size=p.tensors[k].shape) * 0.5
        if k.startswith("dense") and k.endswith(".w"):
            p.tensors[k] = rng.normal(size=p.tensors[k].shape) * 0.5
    p.set_normalizer(rng.normal(size=arch.n_channels) * 0.1, rng.uniform(0.5, 2, arch.n_channels))
    x = rng.standard_normal((batch, arch.n_channels, arch.seq_len))
    y = rng.integers(0, arch.n_classes, batch)
    masks = nnmodel.draw_dropout_masks(arch, batch, rng) if mode == "train" and arch.dropout > 0 else None

    def loss():
        lg, _ = nnmodel.forward_chunks(p, [x], mode, masks, keep_cache=False)
        return ordinal.mean_loss_and_grad(ops.softmax(lg[0]), y)[0]

    lg, cache = nnmodel.forward_chunks(p, [x], mode, masks)
    g = ordinal.mean_loss_and_grad(ops.softmax(lg[0]), y)[1]
    grads = nnmodel.backward_chunks(p, cache, [g])
    return max_relative_error(loss, p.tensors, grads)[0]


def dense_case(seed):
    arch = nnmodel.mlp_architecture(2, 5, 3, hidden=(), dropout=0.0)
    return _model_case(arch, seed)


def cnn_case(seed):
    arch = nnmodel.Architecture("cnn", 4, 40, 3, (3, 2), ((2, 5), (1, 3)), (1, 2), (5,), 0.3)
    return _model_case(arch, seed, "train" if seed % 2 == 0 else "infer")


def mlp_case(seed):
    arch = nnmodel.mlp_architecture(3, 6, 3, hidden=(5, 4, 3), dropout=0.3)
    return _model_case(arch, seed, "train" if seed % 2 == 0 else "infer")


CASES = {
    "conv": conv_case,
    "dense": dense_case,
    "batchnorm": batchnorm_case,
    "fused_bn_relu_pool": fused_bn_pool_case,
    "softmax_ordinal": softmax_ordinal_case,
    "cnn": cnn_case,
    "mlp": mlp_case,
}
