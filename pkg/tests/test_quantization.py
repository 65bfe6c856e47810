import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from attnbof.errors import ContractError, ShapeError
from attnbof.quantization import (Codebook, accumulate_histogram, hyperbolic_quantize, quantize,
                                  rbf_quantize, short_window, tnbof_forward)
from attnbof.tensor import Tensor


def random_codebook(rng, K, D, kernel="rbf"):
    V = rng.standard_normal((K, D))
    if kernel == "rbf":
        return Codebook.from_arrays(V, np.exp(rng.standard_normal((K, D)) * 0.3))
    return Codebook.from_arrays(V, kernel="hyperbolic", bias=rng.standard_normal(K))


# -- rbf -------------------------------------------------------------------

def test_rbf_two_codewords_scalar():
    cb = Codebook.from_arrays([[0.0], [1.0]], [[1.0], [1.0]])
    phi = rbf_quantize(Tensor([[0.0]]), cb).data
    np.testing.assert_allclose(phi[:, 0], [0.7311, 0.2689], atol=5e-5)


def test_rbf_input_on_codeword_dominates():
    cb = Codebook.from_arrays([[0.0, 0.0], [10.0, 0.0], [0.0, -10.0], [10.0, 10.0]])
    phi = rbf_quantize(Tensor([[0.0], [0.0]]), cb).data
    assert phi[0, 0] > 0.99


def test_rbf_matches_oracle():
    rng = np.random.default_rng(0)
    cb = random_codebook(rng, 5, 3)
    X = rng.standard_normal((3, 7))
    np.testing.assert_allclose(rbf_quantize(Tensor(X), cb).data, oracles.rbf_quantize(X, cb.V.data, cb.widths),
                               atol=1e-13)


def test_rbf_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    cb = random_codebook(rng, 4, 3)
    X = rng.standard_normal((3, 3, 6))
    batched = rbf_quantize(Tensor(X), cb).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], rbf_quantize(Tensor(X[b]), cb).data, atol=1e-15)


def test_rbf_dimension_mismatch():
    cb = Codebook.from_arrays(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        rbf_quantize(Tensor(np.zeros((4, 5))), cb)


def test_widths_stay_positive():
    cb = Codebook.from_arrays(np.zeros((2, 2)), [[1e-3, 2.0], [5.0, 1.0]])
    cb.log_w.data[...] = -50.0
    assert np.all(cb.widths > 0)
    with pytest.raises(Exception):
        Codebook.from_arrays(np.zeros((1, 2)), [[1.0, 0.0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["rbf", "hyperbolic"]))
def test_columns_are_probability_vectors(seed, kernel):
    rng = np.random.default_rng(seed)
    K, D, N = rng.integers(1, 7, size=3)
    cb = random_codebook(rng, K, D, kernel)
    phi = quantize(Tensor(rng.standard_normal((D, N)) * 5), cb).data
    assert np.all(phi >= 0)
    np.testing.assert_allclose(phi.sum(axis=0), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rbf_codeword_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    cb = random_codebook(rng, 5, 3)
    perm = rng.permutation(5)
    permuted = Codebook.from_arrays(cb.V.data[perm], cb.widths[perm])
    X = Tensor(rng.standard_normal((3, 6)))
    np.testing.assert_allclose(rbf_quantize(X, permuted).data, rbf_quantize(X, cb).data[perm], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_plain_nbof_is_blind_to_temporal_order(seed):
    rng = np.random.default_rng(seed)
    cb = random_codebook(rng, 6, 4)
    X = rng.standard_normal((4, 9))
    y = accumulate_histogram(rbf_quantize(Tensor(X), cb)).data
    y_shuffled = accumulate_histogram(rbf_quantize(Tensor(X[:, rng.permutation(9)]), cb)).data
    np.testing.assert_allclose(y_shuffled, y, atol=1e-12, rtol=0)


# -- hyperbolic ------------------------------------------------------------

def test_hyperbolic_zero_codebook_is_uniform():
    cb = Codebook.from_arrays(np.zeros((4, 3)), kernel="hyperbolic")
    phi = hyperbolic_quantize(Tensor(np.random.default_rng(2).standard_normal((3, 5))), cb).data
    np.testing.assert_array_equal(phi, np.full((4, 5), 0.25))


def test_hyperbolic_two_codewords_scalar():
    # pre-activations (1, 0) -> softmax(tanh 1, tanh 0)
    cb = Codebook.from_arrays([[1.0], [0.0]], kernel="hyperbolic", bias=[0.0, 0.0])
    phi = hyperbolic_quantize(Tensor([[1.0]]), cb).data
    t = np.tanh(1.0)
    np.testing.assert_allclose(phi[:, 0], [np.exp(t) / (np.exp(t) + 1), 1 / (np.exp(t) + 1)], atol=1e-15)
    # the commonly quoted four-digit value 0.6818 is 0.68170 rounded up one place
    np.testing.assert_allclose(phi[:, 0], [0.6818, 0.3182], atol=2e-4)


def test_hyperbolic_matches_oracle():
    rng = np.random.default_rng(3)
    cb = random_codebook(rng, 5, 3, "hyperbolic")
    X = rng.standard_normal((3, 7))
    expected = oracles.hyperbolic_quantize(X, cb.V.data, cb.bias.data)
    np.testing.assert_allclose(hyperbolic_quantize(Tensor(X), cb).data, expected, atol=1e-13)


def test_kernel_mismatch_is_rejected():
    with pytest.raises(ContractError):
        hyperbolic_quantize(Tensor(np.zeros((2, 2))), Codebook.from_arrays(np.zeros((2, 2))))


# -- histogram -------------------------------------------------------------

def test_histogram_of_equal_columns():
    np.testing.assert_array_equal(accumulate_histogram(Tensor(np.full((2, 3), 0.5))).data, [0.5, 0.5])


def test_histogram_of_identity():
    np.testing.assert_array_equal(accumulate_histogram(Tensor(np.eye(2))).data, [0.5, 0.5])


def test_histogram_empty_is_contract_error():
    with pytest.raises(ContractError):
        accumulate_histogram(np.zeros((3, 0)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_histogram_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    phi = rng.random((rng.integers(1, 8), rng.integers(1, 12)))
    phi /= phi.sum(axis=0)
    y = accumulate_histogram(Tensor(phi)).data
    assert abs(y.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(y, oracles.histogram(phi), atol=1e-15)


# -- tnbof -----------------------------------------------------------------

def test_tnbof_full_split_with_shared_codebook_repeats():
    rng = np.random.default_rng(4)
    cb = random_codebook(rng, 3, 2)
    out = tnbof_forward(Tensor(rng.standard_normal((2, 5))), cb, cb, split=1.0).data
    np.testing.assert_array_equal(out[:3], out[3:])


def test_tnbof_short_half_sees_last_columns_only():
    rng = np.random.default_rng(5)
    long_cb, short_cb = random_codebook(rng, 3, 2), random_codebook(rng, 2, 2)
    X = rng.standard_normal((2, 4))
    out = tnbof_forward(Tensor(X), short_cb, long_cb, split=0.5).data
    expected_short = oracles.histogram(oracles.rbf_quantize(X[:, 2:], short_cb.V.data, short_cb.widths))
    np.testing.assert_allclose(out[3:], expected_short, atol=1e-13)
    X2 = X.copy()
    X2[:, :2] += 100.0  # earlier columns must not affect the short histogram
    np.testing.assert_allclose(tnbof_forward(Tensor(X2), short_cb, long_cb, 0.5).data[3:], out[3:], atol=1e-15)


def test_tnbof_output_length():
    rng = np.random.default_rng(6)
    out = tnbof_forward(Tensor(rng.standard_normal((3, 7))), random_codebook(rng, 2, 3),
                        random_codebook(rng, 5, 3), split=0.3)
    assert out.shape == (7,)


@pytest.mark.parametrize("n,split,expected", [(4, 0.5, 2), (5, 0.5, 3), (7, 0.01, 1), (6, 1.0, 6)])
def test_short_window_is_ceiling(n, split, expected):
    assert short_window(n, split) == expected


@pytest.mark.parametrize("split", [0.0, -0.1, 1.5])
def test_bad_split_is_contract_error(split):
    with pytest.raises(ContractError):
        short_window(4, split)


def test_tnbof_codebooks_must_share_d():
    rng = np.random.default_rng(7)
    with pytest.raises(ShapeError):
        tnbof_forward(Tensor(np.zeros((2, 4))), random_codebook(rng, 2, 3), random_codebook(rng, 2, 2))


# -- initialisation --------------------------------------------------------

def test_random_init_bound():
    cb = Codebook.initialize(16, 8, np.random.default_rng(0))
    assert np.abs(cb.V.data).max() <= np.sqrt(6 / 24)
    assert np.all(cb.widths == 1.0)


def test_kmeans_init_uses_sample():
    rng = np.random.default_rng(1)
    sample = np.concatenate([rng.normal(-5, 0.1, (50, 2)), rng.normal(5, 0.1, (50, 2))])
    cb = Codebook.initialize(2, 2, rng, sample=sample)
    centres = sorted(cb.V.data[:, 0])
    assert centres[0] < -4 and centres[1] > 4
