import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qalora.numkit import group_sum_pool, group_sum_pool_transpose, matmul, numeric_rank


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for r in range(k):
            for j in range(m):
                out[i, j] += a[i, r] * b[r, j]
    return out


def test_matmul_small_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_column_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, np.array([[5.0], [6.0]])), [[17.0], [39.0]])


def test_matmul_identity_left(rng):
    m = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(a, np.eye(4)), a)


def test_matmul_matches_naive_loop_bitwise(rng):
    for shape in [(1, 1, 1), (3, 5, 2), (17, 33, 9), (8, 64, 16)]:
        n, k, m = shape
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_vector_operands(rng):
    a = rng.normal(size=(4, 3))
    x = rng.normal(size=4)
    v = rng.normal(size=3)
    np.testing.assert_allclose(matmul(x, a), x @ a, rtol=1e-14)
    np.testing.assert_allclose(matmul(a, v), a @ v, rtol=1e-14)
    assert matmul(x, a).shape == (3,)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_rejects_non_finite():
    with pytest.raises(ValueError):
        matmul(np.array([[np.nan]]), np.ones((1, 1)))


def test_matmul_deterministic(rng):
    a = rng.normal(size=(30, 40))
    b = rng.normal(size=(40, 20))
    assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


def test_matmul_associativity(rng):
    for _ in range(20):
        n, k, p, m = rng.integers(1, 24, size=4)
        a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, p)), rng.normal(size=(p, m))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * max(np.max(np.abs(left)), 1.0)


def test_pool_example():
    np.testing.assert_array_equal(group_sum_pool(np.array([1.0, 2.0, 3.0, 4.0]), 2), [3.0, 7.0])
    np.testing.assert_array_equal(group_sum_pool(np.array([1.0, 2.0, 3.0, 4.0]), 4), [10.0])
    np.testing.assert_array_equal(group_sum_pool(np.array([1.0, 2.0, 3.0]), 1), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(group_sum_pool(np.arange(1.0, 7.0), 3), [6.0, 15.0])


def test_pool_whole_vector_matches_sequential_sum(rng):
    x = rng.normal(size=37)
    total = 0.0
    for v in x:
        total += v
    assert group_sum_pool(x, 37)[0] == total


def test_pool_batched(rng):
    x = rng.normal(size=(5, 12))
    out = group_sum_pool(x, 3)
    assert out.shape == (5, 4)
    for row in range(5):
        np.testing.assert_array_equal(out[row], group_sum_pool(x[row], 3))


def test_pool_rejects_bad_group():
    with pytest.raises(ValueError):
        group_sum_pool(np.ones(6), 4)
    with pytest.raises(ValueError):
        group_sum_pool(np.ones(6), 0)


def test_pool_transpose_is_adjoint(rng):
    x = rng.normal(size=12)
    u = rng.normal(size=4)
    lhs = float(np.dot(group_sum_pool(x, 3), u))
    rhs = float(np.dot(x, group_sum_pool_transpose(u, 3)))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.integers(0, 2**32 - 1),
)
def test_pool_linearity(groups, g, a, b, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=groups * g)
    y = r.normal(size=groups * g)
    lhs = group_sum_pool(a * x + b * y, g)
    rhs = a * group_sum_pool(x, g) + b * group_sum_pool(y, g)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_rank_examples():
    assert numeric_rank(np.eye(4)) == 4
    assert numeric_rank(np.zeros((3, 5))) == 0
    assert numeric_rank(np.outer([1.0, 2.0, 3.0], [4.0, 5.0])) == 1
    assert numeric_rank(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 1.0]])) == 2


def test_rank_of_thin_product(rng):
    m = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 6))
    assert numeric_rank(m) == 2


def test_rank_rejects_empty():
    with pytest.raises(ValueError):
        numeric_rank(np.zeros((0, 3)))


def test_rank_matches_svd_oracle(rng):
    for _ in range(30):
        n, m = rng.integers(1, 20, size=2)
        r = int(rng.integers(1, min(n, m) + 1))
        mat = rng.normal(size=(n, r)) @ rng.normal(size=(r, m))
        assert numeric_rank(mat) == np.linalg.matrix_rank(mat) == r


def test_rank_of_product_bounded(rng):
    for _ in range(30):
        n, k, m = rng.integers(1, 16, size=3)
        ra, rb = int(rng.integers(1, min(n, k) + 1)), int(rng.integers(1, min(k, m) + 1))
        a = rng.normal(size=(n, ra)) @ rng.normal(size=(ra, k))
        b = rng.normal(size=(k, rb)) @ rng.normal(size=(rb, m))
        assert numeric_rank(matmul(a, b)) <= min(numeric_rank(a), numeric_rank(b))
