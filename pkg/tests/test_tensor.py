import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnbof import ops
from attnbof.errors import ContractError, GraphStateError, NonFiniteError, ShapeError
from attnbof.gradcheck import finite_difference_gradcheck, relative_error
from attnbof.tensor import Tensor, make_op, tensor_create, zero_grad


def leaf(data, name=None):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True, name=name)


# -- tensor_create ---------------------------------------------------------

def test_create_zero_fill():
    assert tensor_create([2, 2], 0).data.tolist() == [[0, 0], [0, 0]]


def test_create_constant_fill():
    assert tensor_create([3], 1).data.tolist() == [1, 1, 1]


def test_create_seeded_uniform_is_reproducible():
    a = tensor_create([2], "uniform", seed=7)
    b = tensor_create([2], "uniform", seed=7)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, tensor_create([2], "uniform", seed=8).data)


def test_create_accepts_full_64_bit_seed():
    a = tensor_create([4], "normal", seed=2 ** 64 - 1)
    assert np.array_equal(a.data, tensor_create([4], "normal", seed=2 ** 64 - 1).data)


@pytest.mark.parametrize("shape", [[0], [2, -1], [1, 1, 1, 1]])
def test_create_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_create(shape, 0)


def test_random_fill_needs_seed():
    with pytest.raises(Exception):
        tensor_create([2], "uniform")


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_data_is_float64():
    assert Tensor(np.ones(3, dtype=np.float32)).data.dtype == np.float64


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    out = ops.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert out.data.tolist() == [[1, 2], [3, 4]]


def test_matmul_selector_row():
    assert ops.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [3.0]])).data.tolist() == [[2]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    A = leaf(rng.standard_normal((3, 4)), "A")
    B = leaf(rng.standard_normal((4, 2)), "B")
    R = Tensor(rng.standard_normal((3, 2)))
    report = finite_difference_gradcheck(lambda: ops.reduce_sum(ops.mul(ops.matmul(A, B), R)), [A, B])
    assert report.worst < 1e-6


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    A, B = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    G = rng.standard_normal((3, 2))
    ops.reduce_sum(ops.mul(ops.matmul(A, B), Tensor(G))).backward()
    np.testing.assert_allclose(A.grad, G @ B.data.T, atol=1e-14)
    np.testing.assert_allclose(B.grad, A.data.T @ G, atol=1e-14)


# -- elementwise -----------------------------------------------------------

def test_mul_example():
    assert ops.mul(Tensor([[1.0, 2.0]]), Tensor([[0.0, 1.0]])).data.tolist() == [[0, 2]]


def test_add_zero_and_sub_self():
    X = Tensor(np.random.default_rng(2).standard_normal((2, 3)))
    assert np.array_equal(ops.add(X, Tensor(np.zeros((2, 3)))).data, X.data)
    assert np.array_equal(ops.sub(X, X).data, np.zeros((2, 3)))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.elementwise("add", Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def test_elementwise_unknown_kind():
    with pytest.raises(Exception):
        ops.elementwise("div", Tensor([1.0]), Tensor([1.0]))


# -- row_softmax -----------------------------------------------------------

def test_row_softmax_uniform():
    assert ops.row_softmax(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]


def test_row_softmax_values():
    out = ops.row_softmax(Tensor([[1.0, 0.0], [0.0, 1.0]])).data
    np.testing.assert_allclose(out, [[0.7311, 0.2689], [0.2689, 0.7311]], atol=5e-5)


def test_row_softmax_large_logits():
    assert ops.row_softmax(Tensor([[1000.0, 1000.0]])).data.tolist() == [[0.5, 0.5]]


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_row_softmax_rows_are_probabilities(a):
    out = ops.row_softmax(Tensor(a)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


# -- reduce_mean_axis ------------------------------------------------------

def test_mean_axis_example():
    assert ops.reduce_mean_axis(Tensor([[1.0, 3.0], [2.0, 4.0]]), 1).data.tolist() == [2, 3]


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_mean_of_constant(axis):
    out = ops.reduce_mean_axis(Tensor(np.full((2, 3, 4), 2.5)), axis).data
    assert np.all(out == 2.5)


def test_mean_gradient_is_uniform():
    X = leaf(np.arange(8.0).reshape(2, 4))
    G = np.array([1.0, -2.0])
    ops.reduce_sum(ops.mul(ops.reduce_mean_axis(X, 1), Tensor(G))).backward()
    np.testing.assert_array_equal(X.grad, np.repeat(G[:, None] * 0.25, 4, axis=1))


def test_mean_bad_axis():
    with pytest.raises(ShapeError):
        ops.reduce_mean_axis(Tensor(np.ones((2, 2))), 2)


# -- backward sweep --------------------------------------------------------

def test_sum_gradient_is_ones():
    X = leaf(np.arange(4.0).reshape(2, 2))
    ops.reduce_sum(X).backward()
    assert X.grad.tolist() == [[1, 1], [1, 1]]


def test_mean_square_gradient():
    X = leaf([[1.0, 2.0]])
    ops.mean_all(ops.mul(X, X)).backward()
    np.testing.assert_allclose(X.grad, [[1.0, 2.0]], atol=1e-15)


def test_diamond_graph_sums_paths():
    X = leaf([[1.0, -2.0, 3.0]])
    a, b = Tensor([[2.0, 2.0, 2.0]]), Tensor([[0.5, -1.0, 4.0]])
    ops.reduce_sum(ops.add(ops.mul(X, a), ops.mul(X, b))).backward()
    np.testing.assert_allclose(X.grad, a.data + b.data)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_fan_out_gradient_equals_sum_of_single_paths(k, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 3))
    weights = [rng.standard_normal((2, 3)) for _ in range(k)]
    X = leaf(x0)
    total = ops.mul(X, Tensor(weights[0]))
    for w in weights[1:]:
        total = ops.add(total, ops.mul(X, Tensor(w)))
    ops.reduce_sum(total).backward()
    single = np.zeros_like(x0)
    for w in weights:
        Y = leaf(x0)
        ops.reduce_sum(ops.mul(Y, Tensor(w))).backward()
        single += Y.grad
    np.testing.assert_allclose(X.grad, single, atol=1e-12)


def test_non_scalar_loss_is_rejected():
    X = leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        ops.mul(X, X).backward()


def test_second_sweep_is_rejected():
    X = leaf(np.ones((2, 2)))
    loss = ops.reduce_sum(X)
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_stale_gradient_is_rejected_until_zeroed():
    X = leaf(np.ones((2, 2)))
    ops.reduce_sum(X).backward()
    with pytest.raises(GraphStateError):
        ops.reduce_sum(X).backward()
    zero_grad([X])
    ops.reduce_sum(ops.scale(X, 3.0)).backward()
    assert np.all(X.grad == 3.0)


def test_no_graph_without_requires_grad():
    out = ops.add(Tensor([1.0]), Tensor([2.0]))
    assert out.node is None


# -- gradcheck -------------------------------------------------------------

def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(3)
    w = leaf(rng.standard_normal((1, 5)), "w")
    x = Tensor(rng.standard_normal((5, 1)))
    report = finite_difference_gradcheck(lambda: ops.reduce_sum(ops.matmul(w, x)), [w])
    assert report.pass_ and report.worst < 1e-10


def test_gradcheck_full_2da_block():
    from attnbof.attention import AttentionBlock, apply_2da
    rng = np.random.default_rng(4)
    S = leaf(rng.standard_normal((4, 5)), "S")
    block = AttentionBlock.create(5)
    block.W_off.data[...] = rng.standard_normal((5, 5)) * 0.3
    R = Tensor(rng.standard_normal((4, 5)))
    report = finite_difference_gradcheck(lambda: ops.reduce_sum(ops.mul(apply_2da(S, block), R)),
                                         [S, block.W_off, block.tau], h=1e-4)
    assert report.pass_ and report.worst < 1e-4


def test_gradcheck_catches_corrupted_backward():
    def bad_square(a):
        return make_op("bad_square", a.data ** 2, [a], lambda g: (g * a.data,))  # missing factor 2

    x = leaf(np.random.default_rng(5).standard_normal((3,)))
    report = finite_difference_gradcheck(lambda: ops.reduce_sum(bad_square(x)), [x])
    assert report.pass_ is False


def test_gradcheck_contract_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        finite_difference_gradcheck(lambda: ops.scale(x, 2.0), [x])
    with pytest.raises(ContractError):
        finite_difference_gradcheck(lambda: ops.reduce_sum(x), [x], h=0.0)


def test_gradcheck_restores_parameters():
    x = leaf([0.3, -0.7])
    before = x.data.copy()
    finite_difference_gradcheck(lambda: ops.reduce_sum(ops.mul(x, x)), [x])
    assert np.array_equal(x.data, before)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-6]))[0] == pytest.approx(5e-7, rel=1e-6)
