import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcases
from painmeter import ordinal
from painmeter.nn import model as nnmodel
from painmeter.nn import ops
from painmeter.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from painmeter.nn.kernels import ShapeError
from painmeter.nn.optim import AdamState, adam_step
from painmeter.nn.ops import UsageError

# -- single-grid ops -----------------------------------------------------------------


def test_conv_output_shape():
    x = np.random.default_rng(0).standard_normal((15, 1000))
    f = ops.conv_forward(x, ops.ConvFilter(np.ones((3, 5))))
    assert f.shape == (13, 996)


def test_conv_relu_clips():
    assert np.all(ops.conv_forward(np.zeros((4, 6)), ops.ConvFilter(np.ones((2, 2)), bias=-1.0)) == 0)


def test_conv_hand_value():
    np.testing.assert_array_equal(ops.conv_forward(np.ones((2, 2)), ops.ConvFilter(np.array([[2.0]]))),
                                  np.full((2, 2), 2.0))


@settings(max_examples=30)
@given(n=st.integers(1, 6), length=st.integers(1, 30), data=st.data())
def test_conv_shape_property(n, length, data):
    s = data.draw(st.integers(1, n))
    t = data.draw(st.integers(1, length))
    f = ops.conv_forward(np.ones((n, length)), ops.ConvFilter(np.ones((s, t))))
    assert f.shape == (n - s + 1, length - t + 1)


def test_conv_window_too_large():
    with pytest.raises(ShapeError):
        ops.conv_forward(np.ones((2, 5)), ops.ConvFilter(np.ones((3, 1))))


def test_global_max_pool():
    assert ops.global_max_pool([[1, 5], [3, 2]]) == (5.0, (0, 1))
    assert ops.global_max_pool(np.full((3, 4), 7.0)) == (7.0, (0, 0))
    g = np.random.default_rng(1).standard_normal((13, 996))
    best = max((g[i, j], (i, j)) for i in range(13) for j in range(996))
    assert ops.global_max_pool(g) == best
    with pytest.raises(ShapeError):
        ops.global_max_pool(np.zeros((0, 3)))


def test_local_max_pool():
    g = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(ops.local_max_pool(g, (2, 2), (2, 2)), [[5, 7], [13, 15]])
    np.testing.assert_array_equal(ops.local_max_pool(g, (4, 4), (4, 4)), [[15]])
    np.testing.assert_array_equal(ops.local_max_pool(g, (1, 1), (1, 1)), g)
    with pytest.raises(ShapeError):
        ops.local_max_pool(g, (5, 1), (1, 1))


def test_dense_forward():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(ops.dense_forward(v, np.eye(3), np.zeros(3)), v)
    np.testing.assert_array_equal(ops.dense_forward(v, np.zeros((2, 3)), np.full(2, -0.5), "relu"), [0, 0])
    w = np.arange(12.0).reshape(3, 4) - 5
    u = np.array([0.5, -1.0, 2.0, 1.5])
    expect = [sum(w[i, j] * u[j] for j in range(4)) + 0.25 for i in range(3)]
    np.testing.assert_allclose(ops.dense_forward(u, w, np.full(3, 0.25)), expect, rtol=1e-14)
    with pytest.raises(ShapeError):
        ops.dense_forward(v, np.eye(4), np.zeros(4))


def test_batchnorm_examples(rng):
    x = rng.standard_normal((500, 4))
    x = (x - x.mean(0)) / x.std(0)
    out, _, _ = ops.batchnorm_forward(x, np.ones(4), np.zeros(4), "train")
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=0)
    out, _, _ = ops.batchnorm_forward(x, np.zeros(4), np.arange(4.0), "train")
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(4.0), x.shape))
    y = rng.standard_normal((64, 3, 5)) * 3 + 2
    out, _, _ = ops.batchnorm_forward(y, np.ones(3), np.zeros(3), "train")
    assert np.abs(out.mean(axis=(0, 2))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2)) - 1).max() < 1e-3


def test_batchnorm_running_stats_and_modes(rng):
    x = rng.standard_normal((8, 2)) + 3
    _, (rm, rv), _ = ops.batchnorm_forward(x, np.ones(2), np.zeros(2), "train", np.zeros(2), np.ones(2))
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0))
    with pytest.raises(UsageError):
        ops.batchnorm_forward(np.zeros((0, 2)), np.ones(2), np.zeros(2), "train")
    with pytest.raises(UsageError):
        ops.batchnorm_forward(x, np.ones(2), np.zeros(2), "infer")


def test_dropout(rng):
    v = np.ones(100000)
    np.testing.assert_array_equal(ops.dropout(v, 0.0, "train", rng), v)
    np.testing.assert_array_equal(ops.dropout(v, 0.5, "infer"), v)
    d = ops.dropout(v, 0.5, "train", rng)
    assert abs((d > 0).mean() - 0.5) < 0.01
    assert set(np.unique(d)) == {0.0, 2.0}
    with pytest.raises(UsageError):
        ops.dropout(v, 1.0, "train", rng)


def test_dropout_preserves_expectation(rng):
    v = rng.uniform(0, 2, 50)
    mean = np.mean([ops.dropout(v, 0.5, "train", rng).mean() for _ in range(10000)])
    assert abs(mean - v.mean()) < 0.01 * v.mean()


def test_softmax_examples():
    np.testing.assert_array_equal(ops.softmax([0.0, 0.0]), [0.5, 0.5])
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ops.softmax([1.0, 2.0, 3.0]), e / e.sum(), rtol=1e-12)


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(z, c):
    p = ops.softmax(z)
    assert abs(p.sum() - 1) < 1e-9
    np.testing.assert_allclose(ops.softmax(z + c), p, rtol=1e-9, atol=1e-15)


# -- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("name", list(gradcases.CASES))
@pytest.mark.parametrize("seed", range(10))
def test_finite_difference(name, seed):
    assert gradcases.CASES[name](seed) < 1e-4


def _small_cnn(seed=0, dropout=0.5):
    arch = nnmodel.Architecture("cnn", 3, 60, 3, (4, 3), ((2, 7), (1, 3)), (1, 2), (6,), dropout)
    return nnmodel.init_params(arch, np.random.default_rng(seed))


def test_zero_output_gradient_gives_zero_grads(rng):
    p = _small_cnn()
    x = rng.standard_normal((4, 3, 60))
    masks = nnmodel.draw_dropout_masks(p.arch, 4, rng)
    _, cache = nnmodel.forward_chunks(p, [x], "train", masks)
    grads = nnmodel.backward_chunks(p, cache, [np.zeros((4, 3))])
    assert all(not np.any(g) for g in grads.values())


def test_batch_gradient_is_sum_of_examples(rng):
    # infer mode keeps batch-norm per-example, so gradients are additive
    p = _small_cnn()
    x = rng.standard_normal((3, 3, 60))
    d = rng.standard_normal((3, 3))
    _, cache = nnmodel.forward_chunks(p, [x], "infer")
    full = nnmodel.backward_chunks(p, cache, [d])
    parts = []
    for i in range(3):
        _, c = nnmodel.forward_chunks(p, [x[i:i + 1]], "infer")
        parts.append(nnmodel.backward_chunks(p, c, [d[i:i + 1]]))
    for k in full:
        np.testing.assert_allclose(full[k], sum(g[k] for g in parts), rtol=1e-10, atol=1e-12)


def test_backward_without_forward():
    with pytest.raises(UsageError):
        nnmodel.backward_chunks(_small_cnn(), None, [np.zeros((1, 3))])
    p = _small_cnn()
    _, cache = nnmodel.forward_chunks(p, [np.zeros((1, 3, 60))], "infer", keep_cache=False)
    with pytest.raises(UsageError):
        nnmodel.backward_chunks(p, cache, [np.zeros((1, 3))])


# -- model ------------------------------------------------------------------------------

def test_forward_outputs_prob_vectors(rng):
    p = _small_cnn()
    x = rng.standard_normal((5, 3, 60))
    probs = nnmodel.model_forward(x, p)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-12)
    assert np.all((probs > 0) & (probs < 1))
    np.testing.assert_array_equal(nnmodel.model_forward(x[0], p), nnmodel.model_forward(x[0], p))
    assert np.abs(probs - 1 / 3).max() < 0.3


def test_fresh_model_near_uniform_default_arch(rng):
    arch = nnmodel.cnn_architecture(15, 1000, 2)
    p = nnmodel.init_params(arch, rng)
    probs = nnmodel.model_forward(rng.standard_normal((2, 15, 1000)), p)
    assert np.abs(probs - 0.5).max() < 0.3


def test_forward_shape_error(rng):
    with pytest.raises(ShapeError):
        nnmodel.model_forward(rng.standard_normal((2, 4, 60)), _small_cnn())


def test_architecture_limits():
    with pytest.raises(ValueError):
        nnmodel.cnn_architecture(3, 100, 2, n_conv=1)
    with pytest.raises(ValueError):
        nnmodel.cnn_architecture(3, 100, 2, n_conv=6)
    assert nnmodel.cnn_architecture(3, 4000, 2, n_conv=5).conv_filters == (16,) * 5
    with pytest.raises(ShapeError):
        nnmodel.cnn_architecture(3, 30, 2, n_conv=3)


def test_predict_proba_block_size_irrelevant(rng):
    p = _small_cnn()
    x = rng.standard_normal((11, 3, 60))
    np.testing.assert_allclose(nnmodel.predict_proba(p, x, 3), nnmodel.predict_proba(p, x, 16), rtol=1e-12)


def test_train_mode_needs_masks(rng):
    p = _small_cnn()
    with pytest.raises(UsageError):
        nnmodel.forward_chunks(p, [rng.standard_normal((2, 3, 60))], "train")


# -- Adam ---------------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    t = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(t, {"w": np.zeros(2)}, AdamState.for_params(t))
    np.testing.assert_array_equal(new["w"], t["w"])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    t = {"w": np.zeros(3)}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    new, _ = adam_step(t, g, AdamState.for_params(t, lr=0.01))
    np.testing.assert_allclose(new["w"], -0.01 * np.sign(g["w"]), rtol=1e-4)


def test_adam_shape_mismatch():
    t = {"w": np.zeros(3)}
    with pytest.raises(UsageError):
        adam_step(t, {"w": np.zeros(2)}, AdamState.for_params(t))
    with pytest.raises(UsageError):
        adam_step(t, {"v": np.zeros(3)}, AdamState.for_params(t))


def test_adam_trajectories_deterministic():
    def run():
        rng = np.random.default_rng(5)
        t = {"w": rng.standard_normal(4)}
        s = AdamState.for_params(t)
        for _ in range(20):
            t, s = adam_step(t, {"w": rng.standard_normal(4)}, s)
        return t["w"]
    assert run().tobytes() == run().tobytes()


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = _small_cnn(3)
    save_checkpoint(p, tmp_path / "m.bin", {"fold": 1})
    q, meta = load_checkpoint(tmp_path / "m.bin")
    assert q.equal(p) and meta == {"fold": 1}
    save_checkpoint(q, tmp_path / "m2.bin", {"fold": 1})
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(_small_cnn(), tmp_path / "m.bin")
    blob = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.bin")


def test_ordinal_grad_matches_model_convention(rng):
    # the model's output gradient is the ordinal logit gradient scaled for the batch mean
    p = rng.dirichlet(np.ones(4), size=6)
    y = rng.integers(0, 4, 6)
    _, g = ordinal.mean_loss_and_grad(p, y)
    np.testing.assert_allclose(g, ordinal.logit_gradients(p, y) / 6)
