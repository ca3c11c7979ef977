import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fastfusion import tensor as tn
from fastfusion.gradcheck import finite_diff_check
from fastfusion.tensor import DegenerateError, ShapeError, Tensor


def P(a):
    return tn.parameter(np.asarray(a, dtype=np.float64))


def test_matmul_identity_and_zero(rng):
    A = Tensor(rng.normal(size=(3, 4)))
    assert np.array_equal(tn.matmul(Tensor(np.eye(3)), A).data, A.data)
    assert not tn.matmul(Tensor(np.zeros((2, 3))), A).data.any()


def test_matmul_known_product():
    out = tn.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    assert out.data.tolist() == [[19, 22], [43, 50]]
    assert oracles.matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]]) == [[19, 22], [43, 50]]


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_matches_triple_loop(n, k, m, seed):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(n, k)), r.normal(size=(k, m))
    ref = np.array(oracles.matmul(A.tolist(), B.tolist()))
    np.testing.assert_allclose(tn.matmul(Tensor(A), Tensor(B)).data, ref, rtol=1e-12, atol=1e-12)


def test_matmul_batched_forms_agree(rng):
    X = rng.normal(size=(2, 3, 4))
    W = rng.normal(size=(4, 5))
    Y = rng.normal(size=(2, 4, 3))
    flat = tn.matmul(Tensor(X), Tensor(W)).data
    assert np.allclose(flat, np.stack([X[b] @ W for b in range(2)]))
    bat = tn.matmul(Tensor(X), Tensor(Y)).data
    assert np.allclose(bat, np.stack([X[b] @ Y[b] for b in range(2)]))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_basics():
    assert np.all(tn.sigmoid(Tensor(np.zeros((2, 3)))).data == 0.5)
    assert tn.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    x = P([0.0])
    tn.backward(tn.sum_all(tn.tanh(x)))
    assert x.grad[0] == 1.0
    assert tn.elementwise("mul", Tensor([2.0]), Tensor([3.0])).data[0] == 6.0
    with pytest.raises(ValueError):
        tn.elementwise("cube", Tensor([1.0]))


def test_add_requires_same_shape():
    with pytest.raises(ShapeError):
        tn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        tn.mask_mul(Tensor(np.ones((1, 3))), np.ones((2, 3)))


def test_softmax_fixed_rows():
    assert np.allclose(tn.softmax_rows(Tensor(np.full((1, 4), 7.0))).data, 0.25)
    out = tn.softmax_rows(Tensor([[0.0, math.log(2)]])).data[0]
    assert np.allclose(out, [1 / 3, 2 / 3], atol=1e-15)
    ref = oracles.softmax_decimal([1, 2, 3])
    np.testing.assert_allclose(tn.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], ref, rtol=1e-14)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one_and_shift_invariant(x):
    y = tn.softmax_rows(Tensor(x)).data
    assert np.allclose(y.sum(axis=-1), 1.0)
    assert (y >= 0).all()
    assert np.allclose(tn.softmax_rows(Tensor(x + 3.5)).data, y, atol=1e-12)


def test_softmax_mask():
    y = tn.softmax_rows(Tensor([[1.0, 5.0, 2.0]]), np.array([[True, False, True]])).data[0]
    assert y[1] == 0.0
    assert np.allclose(y[[0, 2]], oracles.softmax_decimal([1, 2]))
    with pytest.raises(DegenerateError):
        tn.softmax_rows(Tensor([[1.0, 2.0]]), np.array([[False, False]]))
    with pytest.raises(DegenerateError):
        tn.softmax_rows(Tensor(np.zeros((2, 0))))


def test_concat_widths_and_entries():
    n = 5
    parts = [Tensor(np.ones((n, w))) for w in (300, 1, 12, 8, 300, 3)]
    assert tn.concat(parts).shape == (n, 624)
    A = Tensor(np.arange(4.0).reshape(2, 2))
    assert tn.concat([A]) is A
    B = Tensor(np.arange(4.0, 8.0).reshape(2, 2))
    out = tn.concat([A, B]).data
    for i in range(2):
        for j in range(4):
            src = A.data if j < 2 else B.data
            assert out[i, j] == src[i, j % 2]
    with pytest.raises(ShapeError):
        tn.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))])


def test_concat_slice_inverse(rng):
    parts = [Tensor(rng.normal(size=(3, w))) for w in (2, 5, 1)]
    whole = tn.concat(parts)
    lo = 0
    for p in parts:
        assert np.array_equal(tn.slice_axis(whole, lo, lo + p.shape[1]).data, p.data)
        lo += p.shape[1]


def test_quadratic_gradient(rng):
    x = P(rng.normal(size=(3, 2)))
    tn.backward(tn.sum_all(tn.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


def test_unused_input_gets_zero_gradient(rng):
    x, y = P(rng.normal(size=3)), P(rng.normal(size=3))
    loss = tn.add(tn.sum_all(tn.mul(y, y)), tn.mul(tn.sum_all(x), 0.0))
    tn.backward(loss)
    assert not x.grad.any()


def test_sum_gradient_is_ones(rng):
    x = P(rng.normal(size=(4, 3)))
    assert finite_diff_check(tn.sum_all, x) < 1e-9


def test_matmul_sigmoid_chain_fd(rng):
    W = P(rng.normal(size=(4, 3)))
    x = P(rng.normal(size=(2, 4)))
    err = finite_diff_check(lambda: tn.sum_all(tn.sigmoid(tn.matmul(x, W))), [x, W])
    assert err < 1e-4


def test_gradient_accumulates_over_shared_use(rng):
    x = P(rng.normal(size=3))
    tn.backward(tn.sum_all(tn.add(tn.mul(x, 2.0), tn.mul(x, 3.0))))
    assert np.allclose(x.grad, 5.0)


@pytest.mark.parametrize(
    "build",
    [
        lambda x, r: tn.sum_all(tn.tanh(tn.matmul(x, Tensor(r.normal(size=(3, 2)))))),
        lambda x, r: tn.sum_all(tn.mul(tn.softmax_rows(x), Tensor(r.normal(size=(4, 3))))),
        lambda x, r: tn.sum_all(tn.mul(tn.exp(tn.mul(x, 0.3)), tn.relu(x))),
        lambda x, r: tn.sum_all(tn.log(tn.add(tn.mul(x, x), 1.0))),
        lambda x, r: tn.sum_all(tn.index(tn.add_bias(x, Tensor(r.normal(size=3))), (np.array([0, 0, 2]),))),
        lambda x, r: tn.sum_all(tn.mul(tn.reverse_padded(tn.reshape(x, (2, 2, 3)), np.array([2, 1])),
                                       Tensor(r.normal(size=(2, 2, 3))))),
    ],
)
def test_op_gradients_fd(build, rng):
    x = P(rng.normal(size=(4, 3)))
    assert finite_diff_check(lambda t: build(t, np.random.default_rng(7)), x) < 1e-4


def test_embedding_scatter_add(rng):
    table = P(rng.normal(size=(5, 2)))
    out = tn.embedding(table, np.array([[1, 1, 3]]))
    tn.backward(tn.sum_all(out))
    assert table.grad[:, 0].tolist() == [0, 2, 0, 1, 0]


def test_sru_scan_gradient(rng):
    f = P(rng.uniform(0.1, 0.9, size=(2, 4, 3)))
    u = P(rng.normal(size=(2, 4, 3)))
    c0 = P(rng.normal(size=(2, 3)))
    w = Tensor(rng.normal(size=(2, 4, 3)))
    err = finite_diff_check(lambda: tn.sum_all(tn.mul(tn.sru_scan(f, u, c0), w)), [f, u, c0])
    assert err < 1e-6


def test_reverse_padded_is_involution(rng):
    x = Tensor(rng.normal(size=(3, 5, 2)))
    lengths = np.array([5, 2, 0])
    once = tn.reverse_padded(x, lengths)
    assert np.array_equal(tn.reverse_padded(once, lengths).data, x.data)
    assert np.array_equal(once.data[1, 2:], x.data[1, 2:])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        tn.backward(P(np.ones(3)))


def test_no_grad_builds_no_graph():
    x = P([1.0, 2.0])
    with tn.no_grad():
        y = tn.mul(x, x)
    assert not y.requires_grad and y._parents == ()
    assert tn.grad_enabled()


def test_graph_freed_after_backward():
    x = P([1.0, 2.0])
    loss = tn.sum_all(tn.tanh(tn.mul(x, x)))
    tn.backward(loss)
    assert loss._parents == ()
