import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from genlora.errors import NumericalError, ParameterError, ShapeError
from genlora.numerics import RngStream, as_matrix, matmul, rng_normal, rng_uniform, svd


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for p in range(a.shape[1]):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


# --- matmul -----------------------------------------------------------------------


def test_matmul_identity_and_column_pick():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(m, np.array([[0.0], [1.0]])), np.array([[2.0], [4.0]]))


def test_matmul_bitwise_equals_triple_loop():
    rng = np.random.default_rng(3)
    for shape in [(1, 1, 1), (3, 5, 2), (7, 11, 4), (16, 9, 13)]:
        a = rng.standard_normal(shape[:2])
        b = rng.standard_normal(shape[1:])
        assert np.max(np.abs(matmul(a, b) - triple_loop(a, b))) == 0.0


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.zeros(3), np.zeros((3, 1)))


def test_as_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        as_matrix(np.array([[1.0, np.nan]]))


# --- svd --------------------------------------------------------------------------


def check_svd(m, tol=1e-9):
    res = svd(m)
    s, u, v = res.singular_values, res.left_vectors, res.right_vectors
    k = min(m.shape)
    assert s.shape == (k,) and u.shape == (m.shape[0], k) and v.shape == (m.shape[1], k)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert np.max(np.abs(u.T @ u - np.eye(k))) < 1e-10
    assert np.max(np.abs(v.T @ v - np.eye(k))) < 1e-10
    norm = np.linalg.norm(m)
    assert np.linalg.norm(res.reconstruct() - m) <= tol * max(norm, 1e-300) or norm == 0
    return res


def test_svd_diagonal():
    res = check_svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(res.singular_values, [3.0, 2.0, 1.0], atol=1e-14)


def test_svd_unsorted_diagonal_is_sorted():
    res = check_svd(np.diag([1.0, 5.0, 2.0]))
    assert np.allclose(res.singular_values, [5.0, 2.0, 1.0], atol=1e-14)


def test_svd_zero_matrix_has_orthonormal_factors():
    res = check_svd(np.zeros((4, 3)))
    assert np.all(res.singular_values == 0)


def test_svd_rank_one_outer_product():
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal(8), rng.standard_normal(10)
    s = check_svd(np.outer(u, v)).singular_values
    assert np.count_nonzero(s > 1e-10 * s[0]) == 1
    assert s[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-12)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (5, 5), (12, 4), (4, 12), (33, 20)])
def test_svd_matches_lapack_oracle(shape):
    rng = np.random.default_rng(sum(shape))
    m = rng.standard_normal(shape)
    res = check_svd(m)
    ref = np.linalg.svd(m, compute_uv=False)
    assert np.max(np.abs(res.singular_values - ref)) < 1e-12 * ref[0]


def test_svd_energy_identity():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((9, 6))
    s = svd(m).singular_values
    assert abs(np.sum(s**2) - np.sum(m**2)) <= 1e-9 * np.sum(m**2)


def test_svd_rank_deficient_gets_full_basis():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 7))
    res = check_svd(m)
    assert np.count_nonzero(res.singular_values > 1e-10 * res.singular_values[0]) == 3


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError):
        svd(np.array([[np.inf, 0.0], [0.0, 1.0]]))


def test_svd_iteration_cap_raises(monkeypatch):
    import genlora.numerics as numerics

    monkeypatch.setattr(numerics, "MAX_SWEEPS", 0)
    with pytest.raises(NumericalError):
        numerics.svd(np.random.default_rng(0).standard_normal((4, 4)))


@settings(max_examples=300, deadline=None, derandomize=True)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)))
def test_svd_properties_hypothesis(m):
    check_svd(m, tol=1e-9)


# --- rng --------------------------------------------------------------------------


def test_uniform_is_deterministic_and_in_range():
    a = rng_uniform(RngStream(1), -1.0, 1.0, 4)
    b = rng_uniform(RngStream(1), -1.0, 1.0, 4)
    assert np.array_equal(a, b)
    big = rng_uniform(RngStream(1), -1.0, 1.0, 20000)
    assert big.min() >= -1.0 and big.max() < 1.0
    assert abs(big.mean()) < 0.02


def test_uniform_degenerate_range():
    with pytest.raises(ParameterError):
        rng_uniform(RngStream(1), 1.0, 1.0, 4)


def test_streams_differ_by_seed_and_advance():
    s = RngStream(7)
    first, second = s.next_u64(3), s.next_u64(3)
    assert not np.array_equal(first, second)
    assert not np.array_equal(RngStream(7).next_u64(3), RngStream(8).next_u64(3))


def test_fork_is_independent_of_parent_position():
    a = RngStream(3)
    a.next_u64(10)
    assert np.array_equal(a.fork(5).next_u64(4), RngStream(3).fork(5).next_u64(4))


def test_normal_moments_and_edge_cases():
    x = rng_normal(RngStream(11), 2.0, 3.0, 40000)
    assert abs(x.mean() - 2.0) < 0.05 and abs(x.std() - 3.0) < 0.05
    assert np.array_equal(rng_normal(RngStream(0), 0.0, 0.0, 5), np.zeros(5))
    with pytest.raises(ParameterError):
        rng_normal(RngStream(0), 0.0, -1.0, 3)
    assert rng_normal(RngStream(0), 0.0, 1.0, 7).shape == (7,)
