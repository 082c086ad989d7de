import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from adapterforge.linalg import (
    LinalgError,
    RngStream,
    as_mat,
    block_diag,
    gaussian,
    hadamard,
    kaiming_uniform,
    kronecker,
    matmul,
    numerical_rank,
    pinv_left,
    qr,
    solve_sylvester,
    spectral_norm,
    svd,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def low_rank(nprng, m, n, r):
    return nprng.normal(size=(m, r)) @ nprng.normal(size=(r, n))


class TestProducts:
    def test_identity(self, nprng):
        M = nprng.normal(size=(2, 3))
        assert np.array_equal(matmul(np.eye(2), M), M)

    def test_hand_case(self):
        assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_against_triple_loop(self, nprng):
        a, b = nprng.normal(size=(5, 3)), nprng.normal(size=(3, 4))
        assert np.max(np.abs(matmul(a, b) - triple_loop(a, b))) <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(LinalgError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(LinalgError):
            as_mat([[np.nan]])

    def test_hadamard(self, nprng):
        M = nprng.normal(size=(3, 4))
        assert np.array_equal(hadamard(M, np.ones_like(M)), M)
        assert not hadamard(M, np.zeros_like(M)).any()
        with pytest.raises(LinalgError):
            hadamard(M, M.T)

    def test_hadamard_rank_bound(self, nprng):
        a, b = low_rank(nprng, 8, 8, 2), low_rank(nprng, 8, 8, 3)
        assert numerical_rank(hadamard(a, b)) <= 6

    def test_kronecker(self, nprng):
        M = nprng.normal(size=(2, 3))
        assert np.array_equal(kronecker(np.eye(1), M), M)
        assert np.array_equal(kronecker([[1, 2]], [[0, 1]]), [[0, 1, 0, 2]])
        a, b = nprng.normal(size=(3, 2)), nprng.normal(size=(2, 4))
        assert numerical_rank(kronecker(a, b)) == numerical_rank(a) * numerical_rank(b) == 4

    def test_block_diag(self, nprng):
        M = nprng.normal(size=(2, 2))
        assert np.array_equal(block_diag([M]), M)
        out = block_diag([np.ones((2, 3)), np.ones((1, 1))])
        assert out.shape == (3, 4)
        assert not out[:2, 3:].any() and not out[2:, :3].any()
        blocks = [low_rank(nprng, 4, 2, 2), low_rank(nprng, 4, 2, 2)]
        assert numerical_rank(block_diag(blocks)) == 4
        with pytest.raises(LinalgError):
            block_diag([])


class TestSvd:
    def test_diagonal(self):
        assert np.allclose(svd(np.diag([3.0, 1.0])).S, [3.0, 1.0])

    def test_reconstruction_and_order(self, nprng):
        M = nprng.normal(size=(6, 4))
        res = svd(M)
        assert np.all(np.diff(res.S) <= 0)
        assert np.max(np.abs((res.U * res.S) @ res.V.T - M)) <= 1e-12

    def test_sign_convention(self, nprng):
        M = nprng.normal(size=(5, 5))
        for res in (svd(M), svd(-M)):
            idx = np.argmax(np.abs(res.U), axis=0)
            assert np.all(res.U[idx, np.arange(5)] >= 0)

    def test_truncated_is_eckart_young(self, nprng):
        M = nprng.normal(size=(7, 5))
        res = svd(M)
        assert np.isclose(np.linalg.norm(M - res.truncated(2)), np.sqrt(np.sum(res.S[2:] ** 2)), atol=1e-12)

    def test_numerical_rank(self, nprng):
        assert numerical_rank(np.zeros((3, 3))) == 0
        assert numerical_rank(low_rank(nprng, 9, 7, 3)) == 3


class TestQrPinvSylvester:
    def test_qr_positive_diagonal(self, nprng):
        M = nprng.normal(size=(6, 3))
        q, r = qr(M)
        assert np.all(np.diag(r) >= 0)
        assert np.allclose(q @ r, M, atol=1e-12)
        assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)

    def test_qr_wide_needs_complete(self, nprng):
        M = nprng.normal(size=(3, 5))
        with pytest.raises(LinalgError):
            qr(M)
        q, r = qr(M, complete=True)
        assert np.allclose(q @ r, M, atol=1e-12)

    def test_pinv_left(self, nprng):
        A = nprng.normal(size=(6, 3))
        assert np.allclose(pinv_left(A) @ A, np.eye(3), atol=1e-12)
        with pytest.raises(LinalgError):
            pinv_left(low_rank(nprng, 6, 3, 2))

    def test_sylvester_matches_scipy(self, nprng):
        p, q, c = nprng.normal(size=(4, 4)), nprng.normal(size=(4, 4)), nprng.normal(size=(4, 4))
        M = solve_sylvester(p, q, c)
        assert np.allclose(M, scipy.linalg.solve_sylvester(p, q, c), atol=1e-10)
        assert np.max(np.abs(p @ M + M @ q - c)) <= 1e-10

    def test_sylvester_singular(self):
        with pytest.raises(LinalgError):
            solve_sylvester(np.eye(2), -np.eye(2), np.ones((2, 2)))

    def test_spectral_norm(self):
        assert spectral_norm(np.diag([2.0, -5.0])) == pytest.approx(5.0)


class TestRng:
    def test_determinism(self):
        a, b = RngStream(7), RngStream(7)
        assert np.array_equal(a.normal(1.0, (3, 3)), b.normal(1.0, (3, 3)))
        assert a.counter == 9

    def test_spawn_independent_of_parent_draws(self):
        a, b = RngStream(7), RngStream(7)
        a.normal(1.0, (5,))
        assert np.array_equal(a.spawn(3).uniform(0, 1, (4,)), b.spawn(3).uniform(0, 1, (4,)))
        assert not np.array_equal(b.spawn(3).uniform(0, 1, (4,)), b.spawn(4).uniform(0, 1, (4,)))

    def test_kaiming_bounds(self, rng):
        A = kaiming_uniform(64, 8, 64, rng)
        assert np.all(np.abs(A) <= 1 / 8)
        with pytest.raises(LinalgError):
            kaiming_uniform(2, 2, 0, rng)

    def test_gaussian_shape(self, rng):
        assert gaussian(3, 4, 0.5, rng).shape == (3, 4)


# -- properties -------------------------------------------------------------

dims = st.integers(1, 6)


@settings(max_examples=40, deadline=None)
@given(m=dims, n=dims, r1=dims, r2=dims, seed=st.integers(0, 10_000))
def test_subadditivity_and_concat(m, n, r1, r2, seed):
    g = np.random.default_rng(seed)
    a = low_rank(g, m, n, min(r1, m, n))
    b = low_rank(g, m, n, min(r2, m, n))
    ra, rb = numerical_rank(a), numerical_rank(b)
    assert numerical_rank(a + b) <= ra + rb
    cat = numerical_rank(np.hstack([a, b]))
    assert max(ra, rb) <= cat <= ra + rb


@settings(max_examples=40, deadline=None)
@given(shapes=st.lists(st.tuples(dims, dims), min_size=1, max_size=4), seed=st.integers(0, 10_000))
def test_block_diag_rank_is_additive(shapes, seed):
    g = np.random.default_rng(seed)
    blocks = [g.normal(size=s) for s in shapes]
    assert numerical_rank(block_diag(blocks)) == sum(numerical_rank(b) for b in blocks)


@settings(max_examples=40, deadline=None)
@given(m=dims, k=dims, n=dims, seed=st.integers(0, 10_000))
def test_product_rank_min_bound(m, k, n, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(m, k)), g.normal(size=(k, n))
    assert numerical_rank(a @ b) <= min(numerical_rank(a), numerical_rank(b))
