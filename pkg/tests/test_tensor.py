import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semvlp import tensor as T
from semvlp.tensor import Tensor

finite = st.floats(-3, 3, allow_nan=False, width=64)


def leaf(a):
    return Tensor(a, requires_grad=True)


def rel_err(a, b, floor=1e-6):
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


def check_grad(f, *xs, tol=1e-6):
    # floor of 1e-3 keeps near-zero gradients from amplifying roundoff
    out = f(*xs)
    T.backward(out)
    for x in xs:
        num = T.finite_diff_grad(lambda _x: f(*xs), x).data
        assert rel_err(x.grad, num, floor=1e-3) < tol


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_dot():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for t in range(5):
                ref[i, j] += a[i, t] * b[t, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50, width=64)))
def test_softmax_rows_sum_to_one_and_shift_invariant(x):
    p = T.softmax_rows(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + 100)).data, p, atol=1e-12)


def test_softmax_nan_raises():
    with pytest.raises(FloatingPointError):
        T.softmax_rows(Tensor([[np.nan, 0.0]]))


def test_softmax_mask_gives_exact_zero_and_all_masked_raises():
    p = T.softmax(Tensor([[1.0, 2.0, 3.0]]), np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    with pytest.raises(T.AllKeysMaskedError):
        T.softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[3.0] * 4]), one, zero).data, [[0.0] * 4])
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_array_equal(out.data, [[1.0, -1.0]])


def test_layer_norm_two_pass_reference():
    rng = np.random.default_rng(1)
    x, g, b = rng.normal(size=9), rng.normal(size=9), rng.normal(size=9)
    mu = sum(x) / 9
    var = sum((v - mu) ** 2 for v in x) / 9
    ref = [(v - mu) / math.sqrt(var + 1e-12) * gi + bi for v, gi, bi in zip(x, g, b)]
    out = T.layer_norm(Tensor(x[None]), Tensor(g), Tensor(b)).data[0]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


# -- backward -----------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_cross_entropy_uniform_gradient_closed_form():
    z = leaf(np.zeros((1, 4)))
    T.backward(T.cross_entropy(z, [2]))
    np.testing.assert_allclose(z.grad, [[0.25, 0.25, -0.75, 0.25]])


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    y = T.tsum(T.mul(x, x))
    T.backward(y)
    with pytest.raises(T.GraphError):
        T.backward(y)


def test_backward_rejects_non_scalar_and_detached():
    with pytest.raises(T.GraphError):
        T.backward(T.scale(leaf([1.0, 2.0]), 2.0))
    with pytest.raises(T.GraphError):
        T.backward(T.tsum(Tensor([1.0])))


def test_public_ops_do_not_alias():
    src = np.ones(3)
    x = Tensor(src)
    src[0] = 5.0
    assert x.data[0] == 1.0
    y = T.reshape(x, (3, 1))
    y.data[0, 0] = 7.0
    assert x.data[0] == 1.0


def test_determinism_bitwise():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))

    def run():
        x, w = leaf(a), leaf(b)
        T.backward(T.tsum(T.gelu(T.matmul(x, w))))
        return x.grad, w.grad

    g1, g2 = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(g1, g2))


# -- finite differences -------------------------------------------------------

def test_finite_diff_examples():
    np.testing.assert_allclose(T.finite_diff_grad(lambda x: T.tsum(T.mul(x, x)), Tensor([1.0, 2.0, 3.0])).data,
                               [2, 4, 6], atol=1e-8)
    g = T.finite_diff_grad(lambda x: float(np.sin(x.data).sum()), Tensor([0.0])).data
    np.testing.assert_allclose(g, [1.0], atol=1e-9)


def test_gelu_is_exact_erf_form():
    x = np.linspace(-3, 3, 13)
    ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_grad_linear_gelu_layernorm(a, w):
    x, wt = leaf(a), leaf(w)
    b, g, beta = leaf(np.full(2, 0.1)), leaf(np.array([1.0, 2.0])), leaf(np.array([0.0, 0.5]))

    def f(*_):
        return T.tsum(T.mul(T.layer_norm(T.gelu(T.linear(x, wt, b)), g, beta, 1e-3),
                            Tensor([[1.0, -2.0]] * 3)))

    check_grad(f, x, wt, b, g, beta, tol=1e-5)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), st.integers(0, 2))
def test_grad_masked_softmax_matmul(a, masked):
    x = leaf(a)
    mask = np.ones((1, 1, 4), dtype=bool)
    mask[..., masked] = False
    weights = Tensor(np.arange(24.0).reshape(2, 3, 4) / 10)

    def f(*_):
        scores = T.matmul(x, T.transpose(x, (0, 2, 1)))          # (2, 3, 3)
        p = T.softmax(T.concat([scores, T.take(x, (slice(None), slice(None), slice(0, 1)))], axis=2), mask)
        return T.tsum(T.mul(p, weights))

    check_grad(f, x)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_grad_losses(z, targets):
    x = leaf(z)
    soft = np.linspace(0, 1, 12).reshape(4, 3)
    check_grad(lambda *_: T.cross_entropy(x, targets), x)
    x.grad = None
    check_grad(lambda *_: T.bce_with_logits(x, soft), x)
    x.grad = None
    check_grad(lambda *_: T.smooth_l1(x, soft * 3), x, tol=1e-4)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_grad_structural_ops(a):
    x = leaf(a)
    table = leaf(a.T.copy())

    def f(*_):
        y = T.concat([T.transpose(x, (1, 0)), T.embedding(table, np.array([[0, 2], [3, 3]])).reshape(4, 3)], axis=0)
        z = T.take(y, (slice(1, 6), slice(None)))
        return T.tsum(T.mul(T.tanh(z), T.sigmoid(z))) + T.mean(T.exp(T.scale(z, 0.3)))

    check_grad(f, x, table)


def test_smooth_l1_quadratic_zone():
    assert T.smooth_l1(Tensor([0.5]), [0.0]).item() == pytest.approx(0.125)
    assert T.smooth_l1(Tensor([3.0]), [0.0]).item() == pytest.approx(2.5)


def test_bce_examples():
    assert T.bce_with_logits(Tensor([0.0]), [0.5]).item() == pytest.approx(math.log(2))
    assert T.bce_with_logits(Tensor([-1e3] * 3), [0.0] * 3).item() < 1e-6


def test_no_implicit_broadcast():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(T.ShapeError):
        T.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
