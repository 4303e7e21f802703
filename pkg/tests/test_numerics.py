import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stp import numerics as F
from gradcheck import check_op

TOL = 1e-6


def randn(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("op", [F.add, F.sub, F.mul])
def test_broadcasting_elementwise_grads(op, rng):
    assert check_op(op, [randn(rng, 3, 4), randn(rng, 4)]) < TOL
    assert check_op(op, [randn(rng, 2, 1, 4), randn(rng, 3, 1)]) < TOL


def test_div_grad(rng):
    b = rng.uniform(0.5, 2.0, size=(3, 1))
    assert check_op(F.div, [randn(rng, 3, 4), b]) < TOL


@pytest.mark.parametrize("shapes", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)),
                                    ((2, 3, 4), (2, 4, 2)), ((2, 2, 3, 4), (2, 1, 4, 3))])
def test_matmul_grad(shapes, rng):
    assert check_op(F.matmul, [randn(rng, *shapes[0]), randn(rng, *shapes[1])]) < TOL


def test_linear_grad(rng):
    assert check_op(F.linear, [randn(rng, 2, 3, 4), randn(rng, 4, 5), randn(rng, 5)]) < TOL


def test_reductions_and_views(rng):
    x = randn(rng, 2, 3, 4)
    assert check_op(lambda a: F.sum(a, axis=1, keepdims=True), [x]) < TOL
    assert check_op(lambda a: F.mean(a, axis=(0, 2)), [x]) < TOL
    assert check_op(lambda a: a.reshape(4, 6).transpose(1, 0), [x]) < TOL
    assert check_op(lambda a: a[:, 1:, ::2], [x]) < TOL
    assert check_op(lambda a: a[np.array([0, 0, 1])], [x]) < TOL
    assert check_op(lambda a, b: F.concat([a, b], axis=1), [x, randn(rng, 2, 2, 4)]) < TOL


def test_nn_primitive_grads(rng):
    x = randn(rng, 2, 5, 8)
    assert check_op(lambda a, g, b: F.layer_norm(a, g, b, 1e-6),
                    [x, rng.uniform(0.5, 1.5, 8), randn(rng, 8)]) < TOL
    assert check_op(lambda a: F.softmax(a, axis=-1), [x]) < TOL
    assert check_op(F.gelu, [x * 2]) < TOL
    q, k, v = randn(rng, 2, 2, 3, 4), randn(rng, 2, 2, 5, 4), randn(rng, 2, 2, 5, 4)
    assert check_op(F.attention, [q, k, v]) < TOL


def test_gather_scatter_grads(rng):
    idx = np.array([[0, 2, 2], [3, 1, 0]])
    assert check_op(lambda a: F.take_rows(a, idx), [randn(rng, 2, 4, 3)]) < TOL
    assert check_op(lambda a: F.take_rows(a, np.array([1, 1, 3])), [randn(rng, 4, 3)]) < TOL
    vis = np.array([[0, 3], [1, 2]])
    assert check_op(lambda v, f: F.scatter_rows(v, vis, 5, f), [randn(rng, 2, 2, 3), randn(rng, 3)]) < TOL


def test_mse_grad_and_empty(rng):
    t = randn(rng, 3, 4)
    assert check_op(lambda p: F.mse_loss(p, t), [randn(rng, 3, 4)]) < TOL
    p = F.tensor(np.zeros((2, 0, 4)), requires_grad=True)
    loss = F.mse_loss(p, np.zeros((2, 0, 4)))
    assert loss.item() == 0.0
    F.backward(loss)
    assert p.grad.shape == (2, 0, 4)


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 41)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    with F.precision(np.float64):
        np.testing.assert_allclose(F.gelu(F.tensor(x)).data, ref, rtol=1e-12, atol=1e-12)


def test_attention_matches_explicit_softmax(rng):
    q, k, v = randn(rng, 1, 2, 3, 4), randn(rng, 1, 2, 6, 4), randn(rng, 1, 2, 6, 4)
    s = q @ np.swapaxes(k, -1, -2) / 2.0
    w = np.exp(s - s.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    with F.precision(np.float64):
        out, weights = F.attention(F.tensor(q), F.tensor(k), F.tensor(v), return_weights=True)
    np.testing.assert_allclose(weights, w, rtol=1e-12)
    np.testing.assert_allclose(out.data, w @ v, rtol=1e-12)


def test_reused_tensor_accumulates(rng):
    with F.precision(np.float64):
        x = F.tensor(randn(rng, 3), requires_grad=True)
        F.backward(F.sum(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = F.tensor(np.ones(3), requires_grad=True)
    with F.no_grad():
        y = x * 2
    assert not y.requires_grad and y._parents == ()
    assert F.grad_enabled()


def test_non_finite_raises():
    with pytest.raises(F.NonFiniteError):
        F.tensor(np.array([1.0])) / F.tensor(np.array([0.0]))


def test_backward_rejects_non_scalar():
    x = F.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        F.backward(x * 2)


def test_shape_errors():
    with pytest.raises(F.DimensionError):
        F.mse_loss(F.tensor(np.ones((2, 3))), np.ones((3, 2)))
    with pytest.raises(F.DimensionError):
        F.layer_norm(F.tensor(np.ones((2, 3))), F.tensor(np.ones(4)), F.tensor(np.zeros(4)))


def test_default_dtype_and_precision_context():
    assert F.get_default_dtype() == np.float32
    with F.precision(np.float64):
        assert F.tensor([1, 2]).dtype == np.float64
    assert F.tensor([1, 2]).dtype == np.float32
    with pytest.raises(ValueError):
        F.set_default_dtype(np.int32)


finite = st.floats(-30, 30, allow_nan=False, width=64)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    with F.precision(np.float64):
        p = F.softmax(F.tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
              elements=st.floats(-10, 10, width=64)))
def test_layer_norm_standardizes_rows(x):
    d = x.shape[-1]
    with F.precision(np.float64):
        y = F.layer_norm(F.tensor(x), F.tensor(np.ones(d)), F.tensor(np.zeros(d)), 1e-6).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)
    var = x.var(-1)
    np.testing.assert_allclose(y.var(-1), var / (var + 1e-6), rtol=1e-6, atol=1e-9)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_scatter_then_take_recovers_values(n_vis, extra, seed):
    rng = np.random.default_rng(seed)
    n = n_vis + extra
    idx = np.stack([np.sort(rng.permutation(n)[:n_vis]) for _ in range(2)])
    vals = rng.normal(size=(2, n_vis, 3))
    fill = rng.normal(size=3)
    with F.precision(np.float64):
        full = F.scatter_rows(F.tensor(vals), idx, n, F.tensor(fill))
        back = F.take_rows(full, idx).data
    np.testing.assert_array_equal(back, vals)
    holes = np.ones((2, n), bool)
    holes[np.arange(2)[:, None], idx] = False
    np.testing.assert_array_equal(full.data[holes], np.broadcast_to(fill, (holes.sum(), 3)))
