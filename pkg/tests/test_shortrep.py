import numpy as np
import pytest

from srkrylov.core import (
    BandedMatrix,
    BreakdownError,
    CsrMatrix,
    operator_from_csr,
)
from srkrylov.problems import gen_poisson2d, gen_tridiag
from srkrylov.shortrep import (
    apply_V,
    apply_VH,
    build_short_rep,
    load_short_rep,
    minres_u_rep,
    rep_from_lanczos,
    reps_from_bilanczos,
    save_short_rep,
    shuffle_permutation,
    srbicg_dual_solve,
    srbicg_solve,
    srcg_solve,
    srmr_solve,
)
from srkrylov.solvers import bicg_bilanczos, sym_lanczos_solve

from conftest import random_sparse


def lanczos_source(m=7, n=24, seed=3, reorth=False):
    a = gen_poisson2d(m)
    op = operator_from_csr(a)
    b = np.random.default_rng(seed).standard_normal(m * m)
    data, _ = sym_lanczos_solve(op, b, n=n, reorth=reorth)
    return a, op, b, data


def uniform_spd(n=48, lo=1.0, hi=3.0, seed=0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ad = q @ np.diag(np.linspace(lo, hi, n)) @ q.T
    ad = (ad + ad.T) / 2
    return ad, operator_from_csr(CsrMatrix.from_dense(ad)), rng.standard_normal(n)


class TestBuildShortRep:
    def test_j_one_is_identity(self):
        t = BandedMatrix.from_dense(gen_tridiag(1.0, 2.0, 1.0, 6).to_dense(), 1, 1)
        k, pi = build_short_rep(t, 1)
        assert np.allclose(k.to_dense(), np.eye(6))
        assert np.array_equal(pi.forward, np.arange(6))

    def test_j_equals_n_gives_powers(self):
        td = gen_tridiag(0.5, 2.0, -1.0, 5).to_dense()
        t = BandedMatrix.from_dense(td, 1, 1)
        k, pi = build_short_rep(t, 5)
        expected = np.empty((5, 5))
        col = np.eye(5)[:, 0]
        for i in range(5):
            expected[:, i] = col
            col = td @ col
        assert np.allclose(k.to_dense(), expected)
        assert np.array_equal(pi.forward, np.arange(5))

    def test_shuffle_small_case(self):
        pi = shuffle_permutation(4, 2)
        # swaps the two middle indices, fixes the ends
        assert np.array_equal(pi.forward, [0, 2, 1, 3])

    @pytest.mark.parametrize("n,j1,j2", [(12, 2, 6), (12, 3, 4), (24, 4, 6)])
    def test_shuffle_transpose_duality(self, n, j1, j2):
        assert j1 * j2 == n
        p1 = shuffle_permutation(n, j1)
        p2 = shuffle_permutation(n, j2)
        assert np.array_equal(p1.to_dense(), p2.to_dense().T)

    def test_band_structure_bound(self):
        # tridiagonal source: entries vanish beyond offset 2 (J - 1)
        t = BandedMatrix.from_dense(gen_tridiag(1.0, 3.0, -0.5, 12).to_dense(), 1, 1)
        for J in (2, 3, 4, 6):
            k, _ = build_short_rep(t, J)
            kd = k.to_dense()
            for i in range(12):
                for j in range(12):
                    if j - i > 2 * (J - 1) or j < i:
                        assert kd[i, j] == 0.0

    def test_cost_linear_in_n_times_j(self):
        t = BandedMatrix.from_dense(gen_tridiag(1.0, 3.0, -0.5, 36).to_dense(), 1, 1)
        for J in (2, 3, 6, 9):
            _, _, stats = build_short_rep(t, J, return_stats=True)
            assert stats["multiply_adds"] <= 8 * 36 * J

    def test_last_block_shortening(self):
        t = BandedMatrix.from_dense(gen_tridiag(1.0, 2.0, 1.0, 7).to_dense(), 1, 1)
        k, pi = build_short_rep(t, 3)  # 7 = 3 + 3 + 1
        assert k.ncols == 7
        assert len(pi.forward) == 7

    def test_dense_hessenberg_input(self):
        rng = np.random.default_rng(5)
        h = np.triu(rng.standard_normal((6, 6)), -1)
        k, pi = build_short_rep(h, 2)
        expected_col1 = h @ np.eye(6)[:, 0]
        assert np.allclose(k.to_dense()[:, 1], expected_col1)

    def test_non_hessenberg_dense_rejected(self):
        rng = np.random.default_rng(6)
        with pytest.raises(BreakdownError):
            build_short_rep(rng.standard_normal((5, 5)), 2)


class TestReconstruction:
    @pytest.mark.parametrize("J", [2, 3, 4, 6, 8])
    def test_theorem_identity_lanczos(self, J):
        a, op, b, data = lanczos_source(n=24)
        ad = a.to_dense()
        rep = rep_from_lanczos(data, J)
        blocks, power = [], rep.Vtilde
        for j in range(J):
            size = sum(1 for i in range(rep.k) if i * J + j < rep.n)
            blocks.append(power[:, :size])
            if j < J - 1:
                power = ad @ power
        rhs = rep.Pi.permute_cols(np.column_stack(blocks))
        err = np.linalg.norm(data.V @ rep.K.to_dense() - rhs)
        assert err <= 1e-9 * np.linalg.norm(data.V)

    @pytest.mark.parametrize("J", [2, 4, 5])
    def test_theorem_identity_bilanczos(self, J):
        a = random_sparse(30, seed=11, shift=7.0)
        op = operator_from_csr(a)
        b = np.random.default_rng(3).standard_normal(30)
        data, _ = bicg_bilanczos(op, b, n=20)
        ad = a.to_dense()
        for basis, rep in zip(
            (data.U, data.V, data.W), reps_from_bilanczos(data, J)
        ):
            mat = ad.T if basis is data.W else ad
            blocks, power = [], rep.Vtilde
            for j in range(J):
                size = sum(1 for i in range(rep.k) if i * J + j < rep.n)
                blocks.append(power[:, :size])
                if j < J - 1:
                    power = mat @ power
            rhs = rep.Pi.permute_cols(np.column_stack(blocks))
            err = np.linalg.norm(basis @ rep.K.to_dense() - rhs)
            assert err <= 1e-9 * np.linalg.norm(basis) * max(
                1.0, np.linalg.norm(rep.K.to_dense())
            )


class TestHornerProducts:
    def test_stored_column_roundtrip(self):
        a, op, b, data = lanczos_source(n=24)
        rep = rep_from_lanczos(data, 3)
        for i in range(rep.k):
            e = np.zeros(24)
            e[i * 3] = 1.0
            assert np.allclose(
                apply_V(rep, op, e), rep.Vtilde[:, i], atol=1e-10
            )

    def test_j_one_is_dense_product(self):
        a, op, b, data = lanczos_source(n=24)
        rep = rep_from_lanczos(data, 1)
        y = np.random.default_rng(0).standard_normal(24)
        assert np.allclose(apply_V(rep, op, y), data.V @ y)
        z = np.random.default_rng(1).standard_normal(49)
        assert np.allclose(apply_VH(rep, op, z), data.V.T @ z)

    @pytest.mark.parametrize("J", [2, 3, 6])
    def test_products_match_dense_oracle(self, J):
        a, op, b, data = lanczos_source(n=24)
        rng = np.random.default_rng(7)
        rep = rep_from_lanczos(data, J)
        for _ in range(20):
            y = rng.standard_normal(24)
            z = rng.standard_normal(49)
            zv = apply_V(rep, op, y)
            vh = apply_VH(rep, op, z)
            assert np.linalg.norm(zv - data.V @ y) <= 1e-10 * max(
                np.linalg.norm(data.V @ y), 1.0
            )
            assert np.linalg.norm(vh - data.V.T @ z) <= 1e-10 * np.linalg.norm(z)

    @pytest.mark.parametrize("J", [2, 3, 6])
    def test_adjoint_identity(self, J):
        a, op, b, data = lanczos_source(n=24)
        rng = np.random.default_rng(11)
        rep = rep_from_lanczos(data, J)
        for _ in range(10):
            y = rng.standard_normal(24)
            z = rng.standard_normal(49)
            lhs = np.vdot(apply_VH(rep, op, z), y)
            rhs = np.vdot(z, apply_V(rep, op, y))
            scale = np.linalg.norm(z) * np.linalg.norm(data.V @ y)
            assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10 * scale)

    def test_orthogonal_complement_annihilation(self):
        a, op, b, data = lanczos_source(n=24, reorth=True)
        rng = np.random.default_rng(13)
        rep = rep_from_lanczos(data, 3)
        z = rng.standard_normal(49)
        z -= data.V @ (data.V.T @ z)  # oracle projection out of range(V)
        assert np.linalg.norm(apply_VH(rep, op, z)) <= 1e-9 * np.linalg.norm(z)

    def test_product_cost(self):
        a, op, b, data = lanczos_source(n=24)
        rep = rep_from_lanczos(data, 6)
        before = op.counter.count
        apply_V(rep, op, np.ones(24))
        assert op.counter.count - before == 5  # J - 1 applications
        before = op.counter.count
        apply_VH(rep, op, np.ones(49))
        assert op.counter.count - before == 5


class TestSrcg:
    def test_rhs_in_range_full_depth(self):
        ad, op, b = uniform_spd(30)
        data, _ = sym_lanczos_solve(op, b, n=30, reorth=True)
        rep = rep_from_lanczos(data, 3)
        report = srcg_solve(rep, op, b)
        assert report.final_resnorm <= 1e-8 * np.linalg.norm(b)

    def test_residual_orthogonality_poisson(self):
        a = gen_poisson2d(30)
        op = operator_from_csr(a)
        b = np.ones(900)
        data, _ = sym_lanczos_solve(op, b, n=60)
        rep = rep_from_lanczos(data, 6)
        b2 = np.random.default_rng(3).standard_normal(900)
        report = srcg_solve(rep, op, b2)
        r = b2 - a.to_dense() @ report.x
        assert np.linalg.norm(data.V.T @ r) <= 1e-6 * np.linalg.norm(b2)

    def test_cost_accounting(self):
        ad, op, b = uniform_spd(48)
        data, _ = sym_lanczos_solve(op, b, n=48, reorth=True)
        for J in (2, 4, 8):
            rep = rep_from_lanczos(data, J)
            report = srcg_solve(rep, op, b)
            # two Horner products plus the final residual evaluation
            assert report.mv_total == 2 * J - 1
            assert report.rd_total == 48

    def test_singular_projected_system_advises_minres(self):
        # indefinite diagonal with balanced start: the leading projected
        # entry vanishes at depth one
        ad = np.diag([1.0, -1.0])
        op = operator_from_csr(CsrMatrix.from_dense(ad))
        b = np.array([1.0, 1.0]) / np.sqrt(2)
        data, _ = sym_lanczos_solve(op, b, n=1, mode="minres")
        rep = rep_from_lanczos(data, 1)
        with pytest.raises(BreakdownError, match="residual-optimal"):
            srcg_solve(rep, op, b)
        report = srmr_solve(rep, op, b, approach="V")
        assert np.isfinite(report.final_resnorm)


class TestSrmr:
    def test_recovers_minres_iterate(self):
        a, op, b, data = lanczos_source(m=6, n=14, seed=9)
        _, minres_rep = sym_lanczos_solve(op, b, n=14, mode="minres")
        rep = rep_from_lanczos(data, 2)
        report = srmr_solve(rep, op, 2.5 * b, approach="V")
        assert np.allclose(report.x, 2.5 * minres_rep.x, atol=1e-8)

    def test_degenerate_identity_source(self):
        op = operator_from_csr(gen_tridiag(0, 1, 0, 5))
        b = np.ones(5)
        data, _ = sym_lanczos_solve(op, b, n=3)
        assert data.n == 1  # immediate happy breakdown
        rep = rep_from_lanczos(data, 1)
        report = srmr_solve(rep, op, b, approach="V")
        assert np.allclose(report.x, b, atol=1e-10)

    def test_missing_last_col_rejected(self):
        a, op, b, data = lanczos_source(n=12)
        rep = rep_from_lanczos(data, 2)
        rep.last_col = None
        with pytest.raises(ValueError):
            srmr_solve(rep, op, b, approach="V")

    def test_u_approach_orthonormal_image_and_cost(self):
        ad, op, b = uniform_spd(48)
        data, _ = sym_lanczos_solve(op, b, n=48, reorth=True)
        urep = minres_u_rep(data, 4)
        # image of the preimage basis is orthonormal
        img = ad @ np.column_stack(
            [apply_V(urep, op, np.eye(48)[:, j]) for j in range(48)]
        )
        assert np.linalg.norm(img.T @ img - np.eye(48)) <= 1e-8
        report = srmr_solve(urep, op, b, approach="U")
        assert report.mv_total == 2 * 4
        assert report.rd_total == 48
        r = b - ad @ report.x
        q, _ = np.linalg.qr(ad @ data.V)
        assert np.linalg.norm(q.T @ r) <= 1e-7 * np.linalg.norm(b)


class TestSrbicg:
    def test_spd_with_matching_start_equals_srcg(self):
        a = gen_poisson2d(6)
        op = operator_from_csr(a)
        b = np.random.default_rng(21).standard_normal(36)
        n = 12
        bdata, _ = bicg_bilanczos(op, b, n=n, reorth=True)
        sdata, _ = sym_lanczos_solve(op, b, n=n, reorth=True)
        ru, rv, rw = reps_from_bilanczos(bdata, 3)
        rep_v = rep_from_lanczos(sdata, 3)
        r_bicg = srbicg_solve(ru, rw, op, b, approach="U")
        r_cg = srcg_solve(rep_v, op, b)
        assert np.linalg.norm(r_bicg.x - r_cg.x) <= 1e-8 * np.linalg.norm(r_cg.x)

    def test_nonsymmetric_full_depth_oblique_projection(self):
        a = random_sparse(40, seed=19, shift=8.0)
        op = operator_from_csr(a)
        b = np.random.default_rng(23).standard_normal(40)
        data, _ = bicg_bilanczos(op, b, n=40, reorth=True)
        ru, rv, rw = reps_from_bilanczos(data, 2)
        for approach, rep_main in (("U", ru), ("V", rv)):
            report = srbicg_solve(rep_main, rw, op, b, approach=approach)
            r = b - a.to_dense() @ report.x
            assert np.linalg.norm(data.W.T @ r) <= 1e-7 * np.linalg.norm(b)

    def test_no_adjoint_products_of_system_matrix(self):
        # coefficients come through the left representation driven by the
        # adjoint view, so only plain applications of A occur
        calls = {"fwd": 0, "adj": 0}
        a = random_sparse(24, seed=31, shift=7.0)

        from srkrylov.core import LinearOperator, spmv

        at = a.transpose()

        def fwd(x):
            calls["fwd"] += 1
            return spmv(a, x)

        def adj(x):
            calls["adj"] += 1
            return spmv(at, x)

        op = LinearOperator(24, fwd, adj)
        b = np.random.default_rng(2).standard_normal(24)
        data, _ = bicg_bilanczos(op, b, n=12)
        ru, rv, rw = reps_from_bilanczos(data, 3)
        calls["fwd"] = calls["adj"] = 0
        srbicg_solve(ru, rw, op, b, approach="U")
        assert calls["adj"] == 0
        assert calls["fwd"] > 0

    def test_cost_accounting(self):
        a = random_sparse(40, seed=19, shift=8.0)
        op = operator_from_csr(a)
        b = np.random.default_rng(23).standard_normal(40)
        data, _ = bicg_bilanczos(op, b, n=40, reorth=True)
        for J in (2, 4):
            ru, rv, rw = reps_from_bilanczos(data, J)
            report = srbicg_solve(ru, rw, op, b, approach="U")
            assert report.mv_total == 2 * J - 1


class TestSrbicgDual:
    def test_symmetric_coincides_with_primal(self):
        a = gen_poisson2d(5)
        op = operator_from_csr(a)
        b = np.random.default_rng(7).standard_normal(25)
        data, _ = bicg_bilanczos(op, b, n=10, reorth=True)
        ru, rv, rw = reps_from_bilanczos(data, 2)
        primal = srbicg_solve(ru, rw, op, b, approach="U")
        dual = srbicg_dual_solve(rw, ru, op, b, approach="U")
        # symmetric matrix: dual system == primal system; the solutions are
        # projections onto U-span vs W-span, which coincide for w1 = u1
        r_primal = b - a.to_dense() @ primal.x
        r_dual = b - a.to_dense() @ dual.x
        assert np.linalg.norm(data.W.T @ r_primal) <= 1e-7 * np.linalg.norm(b)
        assert np.linalg.norm(data.U.T @ r_dual) <= 1e-7 * np.linalg.norm(b)

    def test_nonsymmetric_dual_orthogonality(self):
        a = random_sparse(36, seed=2, shift=9.0)
        op = operator_from_csr(a)
        b = np.random.default_rng(7).standard_normal(36)
        data, _ = bicg_bilanczos(op, b, n=36, reorth=True)
        ru, rv, rw = reps_from_bilanczos(data, 3)
        dual = srbicg_dual_solve(rw, ru, op, b, approach="U")
        r = b - a.to_dense().T @ dual.x
        assert np.linalg.norm(data.U.T @ r) <= 1e-8 * np.linalg.norm(b)

    def test_v_approach(self):
        a = random_sparse(36, seed=2, shift=9.0)
        op = operator_from_csr(a)
        b = np.random.default_rng(7).standard_normal(36)
        data, _ = bicg_bilanczos(op, b, n=36, reorth=True)
        ru, rv, rw = reps_from_bilanczos(data, 3)
        dual = srbicg_dual_solve(rw, rv, op, b, approach="V")
        r = b - a.to_dense().T @ dual.x
        assert np.linalg.norm(data.V.T @ r) <= 1e-7 * np.linalg.norm(b)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        a, op, b, data = lanczos_source(n=12)
        rep = rep_from_lanczos(data, 3)
        f = tmp_path / "rep.srep"
        save_short_rep(f, rep)
        back = load_short_rep(f)
        assert np.array_equal(back.Vtilde, rep.Vtilde)
        assert np.array_equal(back.K.data, rep.K.data)
        assert np.array_equal(back.Pi.forward, rep.Pi.forward)
        assert (back.n, back.J, back.k) == (rep.n, rep.J, rep.k)
        assert np.array_equal(back.last_col, rep.last_col)
        assert np.array_equal(back.band_T.data, rep.band_T.data)
        y = np.random.default_rng(0).standard_normal(12)
        assert np.allclose(apply_V(back, op, y), apply_V(rep, op, y))
