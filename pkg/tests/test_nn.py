import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsurrogate.nn import (
    BatchNorm,
    Conv1D,
    Dense,
    Model,
    ShapeError,
    Sparse,
    StatisticsNotFinalizedError,
    dense_model,
    init_params,
    param_count,
    relu,
)
from dynsurrogate.sparsify import build_conv_dense_template, build_sparse_template, structured_mask

from gradcheck import max_rel_error, randomize_bn

F64 = np.float64


def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([2.0, -3.0, 0.0])), [2.0, 0.0, 0.0])


def _set(model, name, **values):
    for k, v in values.items():
        model.layer(name).params[k][...] = v


def test_dense_identity():
    m = Model([Dense(3, name="fc")], 3, F64)
    _set(m, "fc", W=np.eye(3), b=0.0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(m.forward(x), x)


def test_dense_relu_by_hand():
    m = Model([Dense(2, "relu", name="fc")], 2, F64)
    _set(m, "fc", W=[[1, 2], [3, 4]], b=[1, -1])
    np.testing.assert_array_equal(m.forward(np.array([[1.0, 1.0]])), [[4.0, 6.0]])


def test_dense_shape_mismatch():
    m = Model([Dense(2)], 3, F64)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 4)))


def test_empty_model_is_identity():
    x = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_array_equal(Model([], 5, F64).forward(x), x)


@pytest.mark.parametrize("activation", ["linear", "relu"])
def test_dense_gradients(activation):
    rng = np.random.default_rng(2)
    m = init_params(Model([Dense(4, activation), Dense(3)], 6, F64), 0)
    randomize_bn(m, rng)
    assert max_rel_error(m, rng.normal(size=(5, 6))) < 1e-5


def test_sparse_with_full_mask_equals_dense():
    rng = np.random.default_rng(3)
    fc = init_params(Model([Dense(5, name="a")], 5, F64), 1)
    sc = Model([Sparse(np.ones((5, 5), bool), name="a")], 5, F64)
    sc.layer("a").set_weights(fc.layer("a").params["W"], fc.layer("a").params["b"])
    x = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(fc.forward(x), sc.forward(x))


def test_sparse_gradients_and_masked_entries():
    rng = np.random.default_rng(4)
    mask = rng.random((6, 6)) < 0.5
    m = init_params(Model([Sparse(mask, "relu", name="s"), Dense(2)], 6, F64), 0)
    randomize_bn(m, rng)
    x = rng.normal(size=(5, 6))
    assert max_rel_error(m, x) < 1e-5
    m.forward(x, True)
    m.backward(np.ones((5, 2)))
    assert np.all(m.layer("s").grads["W"][~mask] == 0)
    assert np.all(m.layer("s").params["W"][~mask] == 0)


def test_sparse_mask_is_immutable():
    layer = Sparse(np.eye(3, dtype=bool))
    with pytest.raises(ValueError):
        layer.mask[0, 1] = True


def test_sparse_lower_triangular_count():
    m = Model([Sparse(structured_mask("lower_triangular", 101))], 101)
    assert param_count(m)["trainable"] == 5252


def test_conv_same_padding_by_hand():
    m = Model([Conv1D(1, 2, "linear", name="c")], 3, F64)
    _set(m, "c", W=1.0, b=0.0)
    np.testing.assert_array_equal(m.forward(np.array([[1.0, 2.0, 3.0]])), [[3.0, 5.0, 3.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(1, 3))
def test_conv_preserves_height(height, f, channels):
    m = init_params(Model([Conv1D(channels, f)], height, F64), 0)
    expected = (2, height) if channels == 1 else (2, height, channels)
    assert m.forward(np.zeros((2, height))).shape == expected


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31))
def test_unit_filter_is_identity(height, seed):
    m = Model([Conv1D(1, 1, "linear", name="c")], height, F64)
    _set(m, "c", W=1.0, b=0.0)
    x = np.random.default_rng(seed).normal(size=(3, height))
    np.testing.assert_array_equal(m.forward(x), x)


def test_conv_rejects_bad_configuration():
    with pytest.raises(ValueError):
        Conv1D(4, 0)
    with pytest.raises(ValueError):
        Conv1D(4, 2, stride=2)


@pytest.mark.parametrize("f", [1, 2, 3])
@pytest.mark.parametrize("height,c_in,c_out", [(1, 1, 1), (5, 2, 3), (7, 3, 2)])
def test_conv_gradients(f, height, c_in, c_out):
    rng = np.random.default_rng(5)
    layers = ([Conv1D(c_in, 2, "relu")] if c_in > 1 else []) + [Conv1D(c_out, f, "relu"), Conv1D(2, f, "linear")]
    m = init_params(Model(layers, height, F64), 0)
    randomize_bn(m, rng)
    assert max_rel_error(m, rng.normal(size=(4, height))) < 1e-5


def test_bn_by_hand():
    m = Model([BatchNorm(name="bn")], 1, F64)
    out = m.forward(np.array([[1.0], [3.0]]), training=True)
    np.testing.assert_allclose(out.ravel(), [-1 / np.sqrt(1 + 1e-8), 1 / np.sqrt(1 + 1e-8)], rtol=1e-15)


def test_bn_identity_parameters():
    rng = np.random.default_rng(6)
    x = rng.normal(2.0, 3.0, size=(50, 4, 1))
    bn = BatchNorm()
    bn.build((4, 1), F64)
    mu, var = x.mean(axis=(0, 2)), x.var(axis=(0, 2))
    bn.params["gamma"][...] = np.sqrt(var + bn.eps)
    bn.params["beta"][...] = mu
    np.testing.assert_allclose(bn.forward(x, training=True), x, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["per_height", "per_element"])
def test_bn_gradients(mode):
    rng = np.random.default_rng(7)
    m = init_params(Model([Conv1D(3, 2), BatchNorm(mode), Conv1D(2, 1, "linear")], 6, F64), 0)
    randomize_bn(m, rng)
    assert max_rel_error(m, rng.normal(size=(5, 6))) < 1e-5


def test_bn_eval_gradients():
    rng = np.random.default_rng(8)
    m = init_params(Model([Conv1D(3, 2), BatchNorm(), Conv1D(1, 1, "linear")], 6, F64), 0)
    randomize_bn(m, rng)
    m.finalize_statistics(rng.normal(size=(20, 6)))
    assert max_rel_error(m, rng.normal(size=(5, 6)), training=False) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(1, 7), st.integers(1, 3), st.integers(0, 2**31))
def test_bn_batch_moments(n, height, channels, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, size=(n, height, channels))
    bn = BatchNorm()
    bn.build((height, channels), F64)
    y = bn.forward(x, training=True)
    V = x.var(axis=(0, 2))
    assert np.abs(y.mean(axis=(0, 2))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2)) - V / (V + bn.eps)).max() < 1e-6


def test_bn_eval_requires_statistics():
    m = Model([Conv1D(2, 2), BatchNorm()], 4, F64)
    with pytest.raises(StatisticsNotFinalizedError):
        m.forward(np.zeros((2, 4)))


def test_bn_eval_independent_of_batch():
    rng = np.random.default_rng(9)
    m = init_params(Model([Conv1D(3, 2), BatchNorm(), Conv1D(1, 1, "linear")], 5, F64), 0)
    m.finalize_statistics(rng.normal(size=(40, 5)))
    x = rng.normal(size=(8, 5))
    batch = m.forward(x)
    single = np.vstack([m.forward(x[i:i + 1]) for i in range(8)])
    np.testing.assert_allclose(batch, single, rtol=1e-13, atol=1e-13)


def test_bn_training_needs_two_samples():
    m = Model([BatchNorm()], 3, F64)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3)), training=True)


def test_finalized_statistics_match_training_pass():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(64, 5))
    m = init_params(Model([Conv1D(3, 2, name="c"), BatchNorm(name="bn"), Conv1D(1, 1, "linear")], 5, F64), 0)
    m.finalize_statistics(X, chunk=10)
    h = m.layer("c").forward(X[:, :, None])
    np.testing.assert_allclose(m.layer("bn").stats["mean"], h.mean(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(m.layer("bn").stats["var"], h.var(axis=(0, 2)), rtol=1e-12)


def test_sparse_template_end_to_end_gradients():
    rng = np.random.default_rng(11)
    m = build_sparse_template(9, 3, structured_mask("banded_lower", 9, 4), n_c=3, dtype=F64)
    randomize_bn(m, rng)
    assert max_rel_error(m, rng.normal(size=(6, 9)), n_entries=20, rng=rng) < 1e-4


def test_shape_chain_checked_at_build():
    with pytest.raises(ShapeError):
        Model([Conv1D(4, 2), Dense(3)], 5)
    with pytest.raises(ShapeError):
        Model([Sparse(np.ones((3, 4), bool))], 5)


def test_duplicate_layer_names_rejected():
    with pytest.raises(ValueError):
        Model([Dense(3, name="a"), Dense(3, name="a")], 3)


def test_parameter_counts():
    pc = lambda m: param_count(m)["trainable"]
    assert pc(dense_model(101)) == 10302
    lower = build_sparse_template(101, 6, structured_mask("lower_triangular", 101))
    assert pc(lower) == 9169
    banded = build_sparse_template(201, 9, structured_mask("banded_lower", 201, 100))
    assert pc(banded) == 23359
    assert param_count(banded)["layers"][-1]["trainable"] == 15452
    conv_dense = build_conv_dense_template(201, 5, 4)
    assert pc(conv_dense) == 166595
    assert [l["trainable"] for l in param_count(conv_dense)["layers"] if l["kind"] == "fc"] == [40602] * 4


def test_bn_listed_count_includes_statistics():
    m = Model([Conv1D(16, 2), BatchNorm(name="bn")], 201)
    rec = next(l for l in param_count(m)["layers"] if l["name"] == "bn")
    assert (rec["trainable"], rec["listed"]) == (402, 804)


def test_init_values():
    m = init_params(build_sparse_template(11, 3, structured_mask("lower_triangular", 11), n_c=4), 5)
    for layer in m.layers:
        if layer.kind == "bn":
            assert np.all(layer.params["gamma"] == 1) and np.all(layer.params["beta"] == 0)
        else:
            assert np.all(layer.params["b"] == 0)


def test_init_deterministic():
    a = init_params(dense_model(7, 2), 3)
    b = init_params(dense_model(7, 2), 3)
    c = init_params(dense_model(7, 2), 4)
    assert all(np.array_equal(a.parameters()[k], b.parameters()[k]) for k in a.parameters())
    assert not np.array_equal(a.parameters()["fc0.W"], c.parameters()["fc0.W"])


def test_init_variance_dense():
    m = init_params(Model([Dense(2000, name="fc")], 50, F64), 0)
    w = m.layer("fc").params["W"]
    assert w.size == 10**5
    assert w.var() == pytest.approx(2 / 50, rel=0.05)


def test_init_variance_uses_masked_fan_in():
    mask = np.zeros((4000, 100), bool)
    mask[:, :25] = True
    m = init_params(Model([Sparse(mask, name="s")], 100, F64), 0)
    w = m.layer("s").params["W"][mask]
    assert w.var() == pytest.approx(2 / 25, rel=0.05)


def test_init_variance_conv():
    m = init_params(Model([Conv1D(16, 2, name="a"), Conv1D(3000, 2, name="c")], 5, F64), 0)
    assert m.layer("c").params["W"].var() == pytest.approx(2 / 32, rel=0.05)
