import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srkrylov.core import (
    BandedMatrix,
    BreakdownError,
    CsrMatrix,
    DimensionMismatch,
    LinearOperator,
    MvCounter,
    PermutationMap,
    adjoint_operator,
    hessenberg_lstsq,
    operator_from_csr,
    reduced_qr,
    spmv,
)
from srkrylov.problems import gen_poisson2d, gen_tridiag

from conftest import random_sparse


class TestCsrMatrix:
    def test_identity_spmv(self):
        a = gen_tridiag(0.0, 1.0, 0.0, 3)
        assert np.array_equal(spmv(a, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_tridiag_spmv_hand_expansion(self):
        a = gen_tridiag(3.0, 2.0, -1.0, 3)
        y = spmv(a, np.ones(3))
        assert np.allclose(y, [1.0, 4.0, 5.0], rtol=0, atol=1e-15)

    def test_poisson_constant_vector(self):
        m = 5
        a = gen_poisson2d(m)
        y = spmv(a, np.ones(m * m))
        # stencil row sums: 0 strictly inside, positive next to the boundary
        for iy in range(m):
            for ix in range(m):
                expected = 4 - sum(
                    1
                    for jx, jy in ((ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1))
                    if 0 <= jx < m and 0 <= jy < m
                )
                assert y[iy * m + ix] == expected
                if 0 < ix < m - 1 and 0 < iy < m - 1:
                    assert y[iy * m + ix] == 0.0
                else:
                    assert y[iy * m + ix] > 0.0

    def test_spmv_dimension_mismatch(self):
        a = gen_tridiag(1.0, 2.0, 1.0, 4)
        with pytest.raises(DimensionMismatch):
            spmv(a, np.ones(5))

    def test_invalid_row_ptr(self):
        with pytest.raises(ValueError):
            CsrMatrix(2, 2, [0, 2, 1], [0, 1, 0], [1.0, 2.0, 3.0])

    def test_duplicates_summed(self):
        a = CsrMatrix.from_coo(2, 2, [0, 0, 1], [0, 0, 1], [1.0, 2.0, 5.0])
        assert np.allclose(a.to_dense(), [[3.0, 0.0], [0.0, 5.0]])

    @given(st.integers(2, 24), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_spmv_matches_dense_oracle(self, n, seed):
        a = random_sparse(n, density=0.4, seed=seed)
        x = np.random.default_rng(seed + 1).standard_normal(n)
        y = spmv(a, x)
        y_ref = a.to_dense() @ x
        scale = np.abs(a.to_dense()) @ np.abs(x) + 1e-300
        assert np.all(np.abs(y - y_ref) <= 1e-13 * scale)

    def test_transpose(self):
        a = random_sparse(7, seed=3)
        assert np.allclose(a.transpose().to_dense(), a.to_dense().T)


class TestOperator:
    def test_counter_shared_and_exact(self):
        a = random_sparse(6, seed=5)
        c = MvCounter()
        op = operator_from_csr(a, c)
        x = np.ones(6)
        op.apply(x)
        op.adjoint_apply(x)
        op.apply_uncounted(x)
        assert c.count == 2

    def test_adjoint_matches_transpose(self, rng):
        a = random_sparse(8, seed=7)
        op = operator_from_csr(a)
        x = rng.standard_normal(8)
        assert np.allclose(op.adjoint_apply(x), a.to_dense().T @ x)

    def test_adjoint_view_swaps(self, rng):
        a = random_sparse(8, seed=11)
        op = operator_from_csr(a)
        x = rng.standard_normal(8)
        adj = adjoint_operator(op)
        assert np.allclose(adj.apply(x), op.adjoint_apply_uncounted(x))
        assert np.allclose(adj.adjoint_apply(x), op.apply_uncounted(x))
        assert adj.counter is op.counter

    def test_missing_adjoint_raises(self):
        op = LinearOperator(3, lambda x: x)
        with pytest.raises(DimensionMismatch):
            op.adjoint_apply(np.ones(3))


class TestReducedQr:
    def test_identity(self):
        q, r = reduced_qr(np.eye(2))
        assert np.allclose(q, np.eye(2))
        assert np.allclose(r, np.eye(2))

    def test_single_column_hand_value(self):
        q, r = reduced_qr(np.array([[3.0], [4.0]]))
        assert np.allclose(q, [[0.6], [0.8]])
        assert np.allclose(r, [[5.0]])

    def test_orthonormality_random(self, rng):
        b = rng.standard_normal((10, 3))
        q, r = reduced_qr(b)
        assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-12
        assert np.all(np.diag(r) > 0)

    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_reconstruction(self, z, seed):
        rng = np.random.default_rng(seed)
        b = rng.standard_normal((z + 4, z))
        q, r = reduced_qr(b)
        assert np.linalg.norm(b - q @ r) <= 1e-12 * np.linalg.norm(b)

    def test_rank_deficiency_detected(self):
        b = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
        with pytest.raises(BreakdownError):
            reduced_qr(b)


class TestHessenbergLstsq:
    def test_trivial(self):
        y, res = hessenberg_lstsq(np.array([[1.0], [0.0]]), np.array([2.0, 0.0]))
        assert np.allclose(y, [2.0])
        assert res == pytest.approx(0.0, abs=1e-15)

    def test_hand_normal_equations(self):
        y, res = hessenberg_lstsq(np.array([[1.0], [1.0]]), np.array([1.0, 0.0]))
        assert np.allclose(y, [0.5])
        assert res == pytest.approx(np.sqrt(0.5))

    def test_against_dense_normal_equations(self, rng):
        n = 5
        h = np.zeros((n + 1, n))
        for j in range(n):
            h[: j + 2, j] = rng.standard_normal(j + 2)
        h[np.tril_indices(n + 1, -2)] = 0.0
        c = rng.standard_normal(n + 1)
        y, res = hessenberg_lstsq(h, c)
        y_ref = np.linalg.solve(h.T @ h, h.T @ c)
        assert np.allclose(y, y_ref, atol=1e-10)
        assert res == pytest.approx(np.linalg.norm(h @ y_ref - c), abs=1e-10)

    def test_residual_orthogonality(self, rng):
        n = 8
        h = np.triu(rng.standard_normal((n + 1, n)), -1)
        c = rng.standard_normal(n + 1)
        y, _ = hessenberg_lstsq(h, c)
        assert np.linalg.norm(h.T @ (h @ y - c)) <= 1e-10 * np.linalg.norm(c)

    def test_singular_structure_raises(self):
        h = np.array([[0.0], [0.0]])
        with pytest.raises(BreakdownError):
            hessenberg_lstsq(h, np.array([1.0, 1.0]))


class TestPermutationMap:
    def test_bijection_enforced(self):
        with pytest.raises(ValueError):
            PermutationMap(np.array([0, 0, 1]))

    @given(st.integers(1, 30), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_and_dense_agreement(self, n, seed):
        rng = np.random.default_rng(seed)
        p = PermutationMap(rng.permutation(n))
        x = rng.standard_normal(n)
        assert np.allclose(p.apply_adjoint(p.apply(x)), x)
        assert np.allclose(p.to_dense() @ x, p.apply(x))
        assert np.allclose(p.transpose().to_dense(), p.to_dense().T)

    def test_permute_cols(self, rng):
        p = PermutationMap(np.array([0, 2, 1, 3]))
        m = rng.standard_normal((5, 4))
        assert np.allclose(p.permute_cols(m), m @ p.to_dense())


class TestBandedMatrix:
    def test_roundtrip_dense(self, rng):
        a = np.triu(np.tril(rng.standard_normal((6, 6)), 1), -2).T
        b = BandedMatrix.from_dense(a, lower=1, upper=2)
        assert np.allclose(b.to_dense(), a)

    def test_matvec_rmatvec(self, rng):
        a = np.triu(np.tril(rng.standard_normal((7, 6)), 2), -1)
        b = BandedMatrix.from_dense(a, lower=1, upper=2)
        x = rng.standard_normal(6)
        z = rng.standard_normal(7)
        assert np.allclose(b.matvec(x), a @ x)
        assert np.allclose(b.rmatvec(z), a.T @ z)

    def test_solve_upper_and_adjoint(self, rng):
        a = np.triu(np.tril(rng.standard_normal((6, 6)) + 3 * np.eye(6), 2))
        b = BandedMatrix.from_dense(a, lower=0, upper=2)
        y = rng.standard_normal(6)
        assert np.allclose(b.solve_upper(y), np.linalg.solve(a, y), atol=1e-12)
        assert np.allclose(
            b.solve_upper_adjoint(y), np.linalg.solve(a.T, y), atol=1e-12
        )

    def test_general_banded_solve(self, rng):
        a = np.triu(np.tril(rng.standard_normal((5, 5)) + 4 * np.eye(5), 1), -1)
        b = BandedMatrix.from_dense(a, lower=1, upper=1)
        y = rng.standard_normal(5)
        assert np.allclose(b.solve(y), np.linalg.solve(a, y), atol=1e-12)

    def test_zero_diagonal_breakdown(self):
        b = BandedMatrix(3, 3, 0, 0)
        with pytest.raises(BreakdownError):
            b.solve_upper(np.ones(3))


class TestComplexVariant:
    """Complex scalars propagate through the same code paths."""

    def test_complex_spmv_and_adjoint(self, rng):
        n = 8
        dense = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        a = CsrMatrix.from_dense(dense)
        op = operator_from_csr(a)
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        assert np.allclose(op.apply(x), dense @ x)
        assert np.allclose(op.adjoint_apply(x), dense.conj().T @ x)

    def test_complex_reduced_qr(self, rng):
        b = rng.standard_normal((10, 3)) + 1j * rng.standard_normal((10, 3))
        q, r = reduced_qr(b)
        assert np.linalg.norm(q.conj().T @ q - np.eye(3)) <= 1e-12
        assert np.linalg.norm(b - q @ r) <= 1e-12 * np.linalg.norm(b)
        assert np.all(np.isreal(np.diag(r))) and np.all(np.diag(r).real > 0)

    def test_complex_hessenberg_lstsq(self, rng):
        n = 5
        h = np.triu(rng.standard_normal((n + 1, n))
                    + 1j * rng.standard_normal((n + 1, n)), -1)
        c = rng.standard_normal(n + 1) + 1j * rng.standard_normal(n + 1)
        y, res = hessenberg_lstsq(h, c)
        y_ref = np.linalg.lstsq(h, c, rcond=None)[0]
        assert np.allclose(y, y_ref, atol=1e-10)
        assert res == pytest.approx(np.linalg.norm(h @ y_ref - c), abs=1e-10)
