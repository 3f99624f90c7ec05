"""Short representations of Krylov bases and the solvers built on them.

A basis ``V`` of a band Hessenberg decomposition ``A V = Vbar Tbar`` never
needs to be stored completely: keeping every J-th column ``Vt`` together
with an upper triangular factor ``K`` and a perfect-shuffle permutation
``Pi`` suffices, because

    ``V K = [Vt, A Vt, ..., A^(J-1) Vt] Pi``.

Products with ``V`` and ``V^H`` then cost ``J - 1`` operator applications
plus ``J`` thin-block products each (Horner evaluation of the block-Krylov
matrix).  The recycling solvers below project new right-hand sides onto
the stored spaces through these products alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg

from .core import (
    BandedMatrix,
    BreakdownError,
    LinearOperator,
    PermutationMap,
    adjoint_operator,
    hessenberg_lstsq,
)
from .report import Recorder, SolveReport
from .solvers import (
    BiLanczosCapture,
    BiLanczosData,
    LanczosCapture,
    LanczosData,
    _tbar_dense,
)

__all__ = [
    "ShortRepresentation",
    "build_short_rep",
    "shuffle_permutation",
    "apply_V",
    "apply_VH",
    "rep_from_lanczos",
    "reps_from_bilanczos",
    "minres_u_rep",
    "srcg_solve",
    "srmr_solve",
    "srbicg_solve",
    "srbicg_dual_solve",
    "save_short_rep",
    "load_short_rep",
    "write_short_rep",
    "read_short_rep",
]

# source (bi)orthogonality defects above this level warrant blocking
DATA_ACCURACY_WARN = 1e-4


@dataclass
class ShortRepresentation:
    """Compressed Krylov basis: stored columns plus ``(K, Pi)`` factors.

    ``Vtilde`` holds columns ``1, 1+J, 1+2J, ...`` of the represented
    basis; ``K`` is upper triangular with the block-head columns equal to
    unit vectors; ``Pi`` is the perfect shuffle pairing power levels with
    stored columns.  ``band_T`` keeps the source band matrix for the
    solves, ``last_col`` the ``n+1``-th basis column where residual-optimal
    solves need it.
    """

    Vtilde: np.ndarray
    K: BandedMatrix
    Pi: PermutationMap
    n: int
    J: int
    k: int
    band_T: Optional[BandedMatrix] = None
    last_col: Optional[np.ndarray] = None
    source_defect: float = float("nan")

    def __post_init__(self) -> None:
        if self.Vtilde.shape[1] != self.k:
            raise ValueError("stored column count does not match k")
        if self.k != -(-self.n // self.J):  # ceil division
            raise ValueError("k must equal ceil(n / J)")


def shuffle_permutation(n: int, J: int) -> PermutationMap:
    """Perfect shuffle sending block position ``i J + j`` to ``j k + i``.

    ``i`` indexes stored columns, ``j`` power levels; for ``J = 1`` or
    ``J = n`` this is the identity.  When ``J`` does not divide ``n`` the
    trailing block simply has fewer power levels.
    """
    k = -(-n // J)
    forward = np.empty(n, dtype=np.intp)
    pos = 0
    for j in range(J):
        for i in range(k):
            a = i * J + j
            if a < n:
                forward[a] = pos
                pos += 1
    return PermutationMap(forward)


def build_short_rep(
    H: Union[BandedMatrix, np.ndarray], J: int, k: Optional[int] = None,
    return_stats: bool = False,
):
    """Triangular factor and shuffle for a Hessenberg matrix.

    Column ``i`` of ``K`` is the unit vector ``e_i`` at block heads
    (``i = 0, J, 2J, ...``) and ``H`` times the previous column otherwise.
    For a banded ``H`` the factor is banded with upper bandwidth
    ``2 (J - 1)`` and costs ``O(n J)`` multiply-adds; for dense input the
    result is a dense upper triangle stored in band form.
    """
    banded = isinstance(H, BandedMatrix)
    if banded:
        n = H.ncols
        h_lower, h_upper = H.lower, H.upper
    else:
        H = np.asarray(H)
        n = H.shape[1]
        h_lower, h_upper = 1, n  # generic Hessenberg
    if J < 1 or J > n:
        raise ValueError("J must lie in [1, n]")
    k_expected = -(-n // J)
    if k is not None and k != k_expected:
        raise ValueError(f"k must be {k_expected} for n={n}, J={J}")
    k = k_expected

    upper_bw = min(n - 1, (J - 1) * (h_upper + h_lower)) if banded else n - 1
    kmat = BandedMatrix(n, n, lower=0, upper=upper_bw)
    kmat.data = kmat.data.astype(H.data.dtype if banded else H.dtype)
    madds = 0
    prev = None
    sup_lo = sup_hi = 0  # support interval [sup_lo, sup_hi] of prev
    for i in range(n):
        if i % J == 0:
            col = np.zeros(n, dtype=kmat.data.dtype)
            col[i] = 1.0
            sup_lo = sup_hi = i
        else:
            if banded:
                col = np.zeros(n, dtype=kmat.data.dtype)
                new_lo = max(0, sup_lo - h_upper)
                new_hi = min(n - 1, sup_hi + h_lower)
                for r in range(new_lo, new_hi + 1):
                    acc = 0.0
                    c0 = max(sup_lo, r - h_lower)
                    c1 = min(sup_hi, r + h_upper)
                    for c in range(c0, c1 + 1):
                        acc += H.get(r, c) * prev[c]
                        madds += 1
                    col[r] = acc
                sup_lo, sup_hi = new_lo, new_hi
            else:
                col = H[:n, :n] @ prev
                madds += n * n
                tail = np.linalg.norm(col[i + 1 :])
                if tail > 1e-12 * max(np.linalg.norm(col), 1e-300):
                    raise BreakdownError(
                        "input is not Hessenberg: column escaped the triangle", i
                    )
                col[i + 1 :] = 0.0
                sup_lo, sup_hi = 0, i
        if sup_hi > i:
            raise BreakdownError("construction left the upper triangle", i)
        for r in range(sup_lo, i + 1):
            if col[r] != 0.0:
                kmat.set(r, i, col[r])
        prev = col
    pi = shuffle_permutation(n, J)
    if return_stats:
        return kmat, pi, {"multiply_adds": madds}
    return kmat, pi


def _split_blocks_y(y: np.ndarray, n: int, J: int, k: int) -> list[np.ndarray]:
    """Split a shuffled coefficient vector into per-power blocks."""
    sizes = []
    pos = 0
    for j in range(J):
        size = sum(1 for i in range(k) if i * J + j < n)
        sizes.append(size)
    out = []
    for size in sizes:
        out.append(y[pos : pos + size])
        pos += size
    return out


def apply_V(rep: ShortRepresentation, A: LinearOperator, y: np.ndarray) -> np.ndarray:
    """Product of the represented basis with a coefficient vector.

    Evaluates the block-Krylov matrix by a Horner scheme: ``J - 1``
    operator applications and ``J`` thin products with the stored columns.
    """
    y = np.asarray(y)
    if len(y) != rep.n:
        raise ValueError(f"coefficient length {len(y)} != n {rep.n}")
    yt = rep.Pi.apply(rep.K.solve_upper(y))
    blocks = _split_blocks_y(yt, rep.n, rep.J, rep.k)
    z = np.zeros(rep.Vtilde.shape[0], dtype=np.result_type(rep.Vtilde, yt))
    for j in range(rep.J - 1, 0, -1):
        if blocks[j].size:
            z += rep.Vtilde[:, : len(blocks[j])] @ blocks[j]
        z = A.apply(z)
    z += rep.Vtilde[:, : len(blocks[0])] @ blocks[0]
    return z


def apply_VH(rep: ShortRepresentation, A: LinearOperator, z: np.ndarray) -> np.ndarray:
    """Product of the conjugate-transposed basis with a long vector.

    The mirrored Horner scheme: ``J - 1`` adjoint applications of the
    driving operator and ``J`` thin products with the stored columns.
    """
    z = np.asarray(z)
    if len(z) != rep.Vtilde.shape[0]:
        raise ValueError("vector length does not match the basis rows")
    blocks = []
    p = z.astype(np.result_type(rep.Vtilde, z), copy=True)
    for j in range(rep.J):
        size = sum(1 for i in range(rep.k) if i * rep.J + j < rep.n)
        blocks.append(rep.Vtilde[:, :size].conj().T @ p)
        if j < rep.J - 1:
            p = A.adjoint_apply(p)
    yt = np.concatenate(blocks)
    return rep.K.solve_upper_adjoint(rep.Pi.apply_adjoint(yt))


def rep_from_lanczos(
    data: Union[LanczosData, LanczosCapture], J: int
) -> ShortRepresentation:
    """Short representation of a symmetric Lanczos basis."""
    if isinstance(data, LanczosCapture):
        if data.J != J:
            raise ValueError("capture stride does not match requested J")
        vt = data.Vt
        defect = float("nan")
    else:
        vt = data.V[:, ::J]
        defect = data.ortho_defect
    tsq = _square_band(data.T_band, data.n)
    kmat, pi = build_short_rep(tsq, J)
    return ShortRepresentation(
        Vtilde=vt,
        K=kmat,
        Pi=pi,
        n=data.n,
        J=J,
        k=-(-data.n // J),
        band_T=data.T_band,
        last_col=data.v_next,
        source_defect=defect,
    )


def reps_from_bilanczos(
    data: Union[BiLanczosData, BiLanczosCapture], J: int
) -> tuple[ShortRepresentation, ShortRepresentation, ShortRepresentation]:
    """Short representations ``(rep_U, rep_V, rep_W)`` of a bi-Lanczos run.

    ``rep_U`` and ``rep_V`` follow the same band recursion under ``A``;
    ``rep_W`` follows the adjoint recursion, so its products are driven by
    the adjoint operator view.
    """
    if isinstance(data, BiLanczosCapture):
        if data.J != J:
            raise ValueError("capture stride does not match requested J")
        ut, vt, wt = data.Ut, data.Vt, data.Wt
        defect = float("nan")
    else:
        ut, vt, wt = data.U[:, ::J], data.V[:, ::J], data.W[:, ::J]
        defect = data.biorth_defect
    n = data.n
    tsq = _square_band(data.T_band, n)
    kmat, pi = build_short_rep(tsq, J)
    k = -(-n // J)
    rep_u = ShortRepresentation(ut, kmat, pi, n, J, k, data.T_band,
                                data.u_next, defect)
    rep_v = ShortRepresentation(vt, kmat, pi, n, J, k, data.T_band,
                                data.v_next, defect)
    # the left basis follows T^H (adjoint band recursion)
    th = BandedMatrix(n, n, lower=1, upper=1)
    th.data = th.data.astype(tsq.data.dtype)
    for j in range(n):
        for i in range(max(0, j - 1), min(n, j + 2)):
            th.set(i, j, np.conj(tsq.get(j, i)))
    kmat_w, pi_w = build_short_rep(th, J)
    rep_w = ShortRepresentation(wt, kmat_w, pi_w, n, J, k, data.T_band,
                                data.w_next, defect)
    return rep_u, rep_v, rep_w


def minres_u_rep(data: LanczosData, J: int) -> ShortRepresentation:
    """Preimage-basis representation with orthonormal image.

    Factors the extended band matrix as ``Tbar = Qbar R`` and represents
    ``U = V R^{-1}``: then ``A U = Vbar Qbar`` has orthonormal columns and
    ``U`` spans the original search space, which is what the
    residual-optimal preimage solve projects with.  ``U``'s own Hessenberg
    is dense upper Hessenberg, so the triangular factor costs ``O(n^2)``
    to build; intended for payload sizes, not for full problem dimension.
    """
    n = data.n
    tbar = _tbar_dense(data.T_band, n)
    q_full, r_full = np.linalg.qr(np.asarray(tbar), mode="complete")
    r = r_full[:n, :]
    # positive-diagonal convention keeps the construction deterministic
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    r = signs[:, None] * r
    qbar = q_full[:, :n] * signs[None, :]
    u = scipy.linalg.solve_triangular(r.T, data.V.T, lower=True).T
    h_u = np.vstack([r @ qbar[:n, :], qbar[n, :][None, :]])
    kmat, pi = build_short_rep(h_u, J)
    return ShortRepresentation(
        Vtilde=u[:, ::J],
        K=kmat,
        Pi=pi,
        n=n,
        J=J,
        k=-(-n // J),
        band_T=data.T_band,
        last_col=None,
        source_defect=data.ortho_defect,
    )


def _square_band(t: BandedMatrix, n: int) -> BandedMatrix:
    """Leading n x n block of an (n+1) x n band matrix."""
    out = BandedMatrix(n, n, lower=t.lower, upper=t.upper)
    out.data = np.array(t.data[:, :n])
    if t.lower >= 1 and n >= 1:
        # drop the below-square entry
        out.data[t.upper + 1, n - 1] = 0.0
    return out


def _solve_tridiag(t: BandedMatrix, n: int, rhs: np.ndarray) -> np.ndarray:
    ab = np.zeros((3, n), dtype=np.result_type(t.data, rhs))
    for j in range(n):
        ab[1, j] = t.get(j, j)
        if j > 0:
            ab[0, j] = t.get(j - 1, j)
        if j + 1 < n:
            ab[2, j] = t.get(j + 1, j)
    try:
        y = scipy.linalg.solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise BreakdownError(
            "projected band system is singular; use the residual-optimal solve"
        ) from exc
    res = _tbar_dense(t, n)[:n, :n] @ y - rhs
    t_scale = float(np.max(np.abs(t.data))) or 1.0
    if (
        not np.all(np.isfinite(y))
        or np.linalg.norm(res) > 1e-8 * max(np.linalg.norm(rhs), 1e-300)
        or np.linalg.norm(y) * t_scale > 1e10 * max(np.linalg.norm(rhs), 1e-300)
    ):
        raise BreakdownError(
            "projected band system is singular; use the residual-optimal solve"
        )
    return y


def _finish_report(A, b, x, rec, method, rd, defects):
    res = rec.record(x, force=True)
    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=bool(res <= 1e-8 * np.linalg.norm(b)),
        mv_total=rec.mv,
        rd_total=rd,
        method=method,
        defects=defects,
        markers=rec.markers,
    )
    return report


def _warn_data_accuracy(rep: ShortRepresentation, report: SolveReport) -> None:
    if np.isfinite(rep.source_defect) and rep.source_defect > DATA_ACCURACY_WARN:
        report.warnings.append(
            "source (bi)orthogonality defect "
            f"{rep.source_defect:.1e} exceeds {DATA_ACCURACY_WARN:.0e}; "
            "consider stabilization by blocking"
        )


def srcg_solve(
    rep_V: ShortRepresentation, A: LinearOperator, b: np.ndarray
) -> SolveReport:
    """Galerkin recycling solve over a symmetric Lanczos representation.

    Projects the right-hand side onto the stored basis, solves the
    tridiagonal system and lifts back: the residual is orthogonal to the
    represented space.  Costs two Horner products plus the final residual
    evaluation.
    """
    b = np.asarray(b)
    rec = Recorder(A, b, every_mv=False)
    rec.record(np.zeros(A.dim, dtype=np.result_type(b, 1.0)))
    c = apply_VH(rep_V, A, b)
    y = _solve_tridiag(rep_V.band_T, rep_V.n, c)
    x = apply_V(rep_V, A, y)
    r = b - A.apply(x)
    defect = float(
        np.linalg.norm(apply_VH(rep_V, _uncounted_view(A), r))
        / max(np.linalg.norm(b), 1e-300)
    )
    report = _finish_report(
        A, b, x, rec, "srcg", rep_V.n, {"residual_vs_basis": defect}
    )
    _warn_data_accuracy(rep_V, report)
    return report


def srmr_solve(
    rep: ShortRepresentation,
    A: LinearOperator,
    b: np.ndarray,
    approach: str = "V",
) -> SolveReport:
    """Residual-optimal recycling solve over a Lanczos representation.

    The V-approach solves the extended least-squares system (needs the
    stored ``n+1``-th column); the U-approach projects ``A b`` onto an
    image-orthonormal preimage basis and costs one extra product.
    """
    b = np.asarray(b)
    rec = Recorder(A, b, every_mv=False)
    rec.record(np.zeros(A.dim, dtype=np.result_type(b, 1.0)))
    if approach == "V":
        if rep.last_col is None:
            raise ValueError("V-approach needs the stored n+1-th column")
        c = apply_VH(rep, A, b)
        c_bar = np.concatenate([c, [np.vdot(rep.last_col, b)]])
        y, _ = hessenberg_lstsq(_tbar_dense(rep.band_T, rep.n), c_bar)
        x = apply_V(rep, A, y)
    elif approach == "U":
        ab = A.apply(b)
        c = apply_VH(rep, A, ab)
        x = apply_V(rep, A, c)
    else:
        raise ValueError("approach must be 'V' or 'U'")
    r = b - A.apply(x)
    defect = float(
        np.linalg.norm(apply_VH(rep, _uncounted_view(A), r))
        / max(np.linalg.norm(b), 1e-300)
    )
    report = _finish_report(
        A, b, x, rec, f"srmr-{approach.lower()}", rep.n,
        {"residual_vs_basis": defect},
    )
    _warn_data_accuracy(rep, report)
    return report


def srbicg_solve(
    rep_main: ShortRepresentation,
    rep_W: ShortRepresentation,
    A: LinearOperator,
    b: np.ndarray,
    approach: str = "U",
) -> SolveReport:
    """Oblique recycling solve over a bi-Lanczos representation.

    Coefficients come from the left basis (evaluated through adjoint-side
    Horner products, which only ever apply ``A``), the solution from the
    search or image basis.  The residual is orthogonal to the left space.
    """
    b = np.asarray(b)
    rec = Recorder(A, b, every_mv=False)
    rec.record(np.zeros(A.dim, dtype=np.result_type(b, 1.0)))
    aH = adjoint_operator(A)
    c = apply_VH(rep_W, aH, b)
    if approach == "U":
        x = apply_V(rep_main, A, c)
    elif approach == "V":
        y = _solve_tridiag(rep_main.band_T, rep_main.n, c)
        x = apply_V(rep_main, A, y)
    else:
        raise ValueError("approach must be 'U' or 'V'")
    r = b - A.apply(x)
    defect = float(
        np.linalg.norm(apply_VH(rep_W, _uncounted_view(aH), r))
        / max(np.linalg.norm(b), 1e-300)
    )
    report = _finish_report(
        A, b, x, rec, f"srbicg-{approach.lower()}", rep_main.n,
        {"residual_vs_left_basis": defect},
    )
    _warn_data_accuracy(rep_main, report)
    _warn_data_accuracy(rep_W, report)
    return report


def srbicg_dual_solve(
    rep_W: ShortRepresentation,
    rep_other: ShortRepresentation,
    A: LinearOperator,
    b: np.ndarray,
    approach: str = "U",
) -> SolveReport:
    """Recycling solve of the adjoint system from the same payload.

    The roles of the bases swap: the left basis carries the solution, the
    search/image basis carries the coefficients.  The dual residual is
    orthogonal to the search space of the primal payload.
    """
    b = np.asarray(b)
    aH = adjoint_operator(A)
    rec = Recorder(aH, b, every_mv=False)
    rec.record(np.zeros(A.dim, dtype=np.result_type(b, 1.0)))
    if approach == "U":
        c = apply_VH(rep_other, A, b)  # U^H b through A-driven products
        x = apply_V(rep_W, aH, c)
    elif approach == "V":
        c = apply_VH(rep_other, A, b)  # V^H b
        tsq = _square_band(rep_other.band_T, rep_other.n)
        th = np.zeros((rep_other.n, rep_other.n), dtype=tsq.data.dtype)
        for j in range(rep_other.n):
            for i in range(max(0, j - 1), min(rep_other.n, j + 2)):
                th[i, j] = np.conj(tsq.get(j, i))
        y = np.linalg.solve(th, c)
        x = apply_V(rep_W, aH, y)
    else:
        raise ValueError("approach must be 'U' or 'V'")
    r = b - aH.apply(x)
    defect = float(
        np.linalg.norm(apply_VH(rep_other, _uncounted_view(A), r))
        / max(np.linalg.norm(b), 1e-300)
    )
    report = _finish_report(
        aH, b, x, rec, f"srbicg-dual-{approach.lower()}", rep_W.n,
        {"dual_residual_vs_search_basis": defect},
    )
    return report


class _UncountedView:
    """Operator facade whose applications never touch the counter."""

    def __init__(self, op: LinearOperator):
        self._op = op
        self.dim = op.dim

    def apply(self, x):
        return self._op.apply_uncounted(x)

    def adjoint_apply(self, x):
        return self._op.adjoint_apply_uncounted(x)

    def apply_uncounted(self, x):
        return self._op.apply_uncounted(x)

    def adjoint_apply_uncounted(self, x):
        return self._op.adjoint_apply_uncounted(x)


def _uncounted_view(op) -> "_UncountedView":
    if isinstance(op, _UncountedView):
        return op
    return _UncountedView(op)


_MAGIC = b"SREP1"


def save_short_rep(path, rep: ShortRepresentation) -> None:
    """Flat binary container: dims, stored columns, band factors, shuffle."""
    with open(path, "wb") as fh:
        write_short_rep(fh, rep)


def write_short_rep(fh, rep: ShortRepresentation) -> None:
    nrows = rep.Vtilde.shape[0]
    complex_ = np.iscomplexobj(rep.Vtilde) or np.iscomplexobj(rep.K.data)
    dt = np.complex128 if complex_ else np.float64
    has_last = rep.last_col is not None
    has_t = rep.band_T is not None
    fh.write(_MAGIC)
    fh.write(
        struct.pack(
            "<qqqqqqqq",
            nrows,
            rep.n,
            rep.J,
            rep.k,
            1 if complex_ else 0,
            rep.K.upper,
            1 if has_last else 0,
            1 if has_t else 0,
        )
    )
    fh.write(np.asarray(rep.Vtilde, dtype=dt).tobytes(order="F"))
    fh.write(np.asarray(rep.K.data, dtype=dt).tobytes(order="F"))
    fh.write(rep.Pi.forward.astype(np.int64).tobytes())
    if has_last:
        fh.write(np.asarray(rep.last_col, dtype=dt).tobytes())
    if has_t:
        fh.write(
            struct.pack("<qqqq", rep.band_T.nrows, rep.band_T.ncols,
                        rep.band_T.lower, rep.band_T.upper)
        )
        fh.write(np.asarray(rep.band_T.data, dtype=dt).tobytes(order="F"))


def load_short_rep(path) -> ShortRepresentation:
    with open(path, "rb") as fh:
        return read_short_rep(fh)


def read_short_rep(fh) -> ShortRepresentation:
    if fh.read(5) != _MAGIC:
        raise ValueError("bad short-representation magic")
    nrows, n, J, k, complex_, k_upper, has_last, has_t = struct.unpack(
        "<qqqqqqqq", fh.read(64)
    )
    dt = np.complex128 if complex_ else np.float64
    isz = np.dtype(dt).itemsize
    vt = np.frombuffer(fh.read(nrows * k * isz), dtype=dt).reshape(
        (nrows, k), order="F"
    )
    kdata = np.frombuffer(fh.read((k_upper + 1) * n * isz), dtype=dt).reshape(
        (k_upper + 1, n), order="F"
    )
    kmat = BandedMatrix(n, n, lower=0, upper=int(k_upper), data=kdata.copy())
    fwd = np.frombuffer(fh.read(8 * n), dtype=np.int64)
    last = None
    if has_last:
        last = np.frombuffer(fh.read(nrows * isz), dtype=dt).copy()
    band_t = None
    if has_t:
        tn, tm, tl, tu = struct.unpack("<qqqq", fh.read(32))
        tdata = np.frombuffer(
            fh.read((tl + tu + 1) * tm * isz), dtype=dt
        ).reshape((tl + tu + 1, tm), order="F")
        band_t = BandedMatrix(tn, tm, tl, tu, data=tdata.copy())
    return ShortRepresentation(
        Vtilde=vt.copy(),
        K=kmat,
        Pi=PermutationMap(fwd.astype(np.intp)),
        n=int(n),
        J=int(J),
        k=int(k),
        band_T=band_t,
        last_col=last,
    )
