"""First-system solvers that emit recycling payloads.

RGCR keeps growing orthonormal image bases (the full-recycling baseline);
``bicg_bilanczos`` and ``sym_lanczos_solve`` run two-term recursions and
return decomposition data later compressed into short representations.
The IDR(s) family lives in :mod:`srkrylov.sridr`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg

from .core import BandedMatrix, BreakdownError, LinearOperator, BREAKDOWN_RTOL, hessenberg_lstsq
from .report import Recorder, SolveReport

__all__ = [
    "BiLanczosData",
    "BiLanczosCapture",
    "LanczosData",
    "LanczosCapture",
    "rgcr_solve",
    "bicg_bilanczos",
    "sym_lanczos_solve",
    "hermitian_probe",
]


def _record_every_mv(dim: int) -> bool:
    # history granularity: one row per operator application at desk scale
    return dim <= 1000


def rgcr_solve(
    A: LinearOperator,
    U: Optional[np.ndarray],
    V: Optional[np.ndarray],
    b: np.ndarray,
    tol: float = 1e-8,
    maxit: int = 10000,
) -> tuple[np.ndarray, np.ndarray, SolveReport]:
    """Recycling generalized conjugate residual from zero initial guess.

    ``U``/``V`` carry search/image bases of earlier solves with
    ``A U = V`` and orthonormal ``V``; both grow by one column per
    iteration and are returned for the next right-hand side.  The final
    residual is orthogonal to the extended image basis, so the recorded
    residual norms never increase.
    """
    n = A.dim
    b = np.asarray(b)
    dtype = np.result_type(b, 1.0)
    if U is None or V is None or U.size == 0:
        U = np.zeros((n, 0), dtype=dtype)
        V = np.zeros((n, 0), dtype=dtype)
    m = U.shape[1]
    if m:
        # probabilistic precondition check, diagnostics only
        z = np.random.default_rng(0).standard_normal(m)
        img = A.apply_uncounted(U @ z)
        if np.linalg.norm(img - V @ z) > 1e-8 * max(np.linalg.norm(img), 1.0):
            raise ValueError("recycled bases violate A U = V")
        if np.linalg.norm(V.conj().T @ (V @ z) - z) > 1e-8 * max(np.linalg.norm(z), 1.0):
            raise ValueError("recycled image basis is not orthonormal")

    cols_u = [np.asarray(c) for c in U.T]
    cols_v = [np.asarray(c) for c in V.T]
    x = np.zeros(n, dtype=dtype)
    r = b.astype(dtype).copy()
    rec = Recorder(A, b, every_mv=_record_every_mv(n))
    bnorm = np.linalg.norm(b)
    target = tol * bnorm

    if cols_v:
        vmat = np.column_stack(cols_v)
        umat = np.column_stack(cols_u)
        w = vmat.conj().T @ r
        x += umat @ w
        r -= vmat @ w
    res = rec.record(x)
    converged = res <= target
    stagnated = False

    it = 0
    while not converged and it < maxit:
        it += 1
        u = r.copy()
        v = A.apply(u)
        # Gram-Schmidt against the image basis, one reorthogonalization pass
        if cols_v:
            for _ in range(2):
                for uc, vc in zip(cols_u, cols_v):
                    g = np.vdot(vc, v)
                    v -= g * vc
                    u -= g * uc
        ell = np.linalg.norm(v)
        if ell <= BREAKDOWN_RTOL * max(np.linalg.norm(r), 1e-300):
            stagnated = True
            rec.record(x, force=True)
            break
        u /= ell
        v /= ell
        w = np.vdot(v, r)
        x += w * u
        r -= w * v
        cols_u.append(u)
        cols_v.append(v)
        res = rec.record(x)
        converged = res <= target

    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=bool(converged and not stagnated),
        mv_total=rec.mv,
        rd_total=len(cols_v),
        method="rgcr",
        markers=rec.markers,
    )
    if stagnated:
        report.warnings.append("stagnation: new direction below breakdown tolerance")
    u_out = np.column_stack(cols_u) if cols_u else np.zeros((n, 0), dtype=dtype)
    v_out = np.column_stack(cols_v) if cols_v else np.zeros((n, 0), dtype=dtype)
    return u_out, v_out, report


@dataclass
class LanczosData:
    """Symmetric Lanczos decomposition ``A V = Vbar Tbar``, fully stored."""

    V: np.ndarray
    v_next: np.ndarray
    T_band: BandedMatrix
    n: int
    ortho_defect: float = float("nan")


@dataclass
class LanczosCapture:
    """Stride-``J`` capture of a Lanczos basis for short representations."""

    Vt: np.ndarray
    J: int
    n: int
    T_band: BandedMatrix
    v_next: np.ndarray
    boundary: dict = field(default_factory=dict)  # 1-based col -> v


@dataclass
class BiLanczosData:
    """Two-sided Lanczos decomposition with preimages, fully stored.

    Satisfies ``A U = V``, ``A V = Vbar Tbar``, ``A^H W`` following the
    adjoint band recursion, and ``W^H V = I`` up to the recorded
    biorthogonality defect.  ``ext_V``/``ext_U`` hold image/preimage
    columns with indices ``n+2 .. n+1+e`` when the run was extended for
    post-iterations.
    """

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    u_next: np.ndarray
    v_next: np.ndarray
    w_next: np.ndarray
    T_band: BandedMatrix  # (n+1) x n, one sub- and one superdiagonal
    n: int
    ext_V: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    ext_U: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    biorth_defect: float = float("nan")
    t_next_sup: complex = 0.0  # coupling entry t[n, n+1] of the widened band


@dataclass
class BiLanczosCapture:
    """Strided capture of a bi-Lanczos run: every J-th column only."""

    Ut: np.ndarray
    Vt: np.ndarray
    Wt: np.ndarray
    J: int
    n: int
    T_band: BandedMatrix
    u_next: np.ndarray
    v_next: np.ndarray
    w_next: np.ndarray
    boundary: dict = field(default_factory=dict)  # 1-based col -> (u, v, w)


def _tridiag_band(n_cols: int) -> BandedMatrix:
    return BandedMatrix(n_cols + 1, n_cols, lower=1, upper=1)


def _trim_band(t: BandedMatrix, m: int) -> BandedMatrix:
    out = _tridiag_band(m)
    out.data = np.array(t.data[:, :m])
    return out


def _tbar_dense(t: BandedMatrix, m: int) -> np.ndarray:
    """Leading (m+1) x m block of the band matrix as a dense array."""
    out = np.zeros((m + 1, m), dtype=t.data.dtype)
    for j in range(m):
        for i in range(max(0, j - 1), min(m + 1, j + 2)):
            out[i, j] = t.get(i, j)
    return out


def hermitian_probe(A: LinearOperator, seed: int = 0, rtol: float = 1e-8) -> bool:
    """Probabilistic symmetry check: compares x^H A y with (A x)^H y."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.dim)
    y = rng.standard_normal(A.dim)
    ax = A.apply_uncounted(x)
    ay = A.apply_uncounted(y)
    scale = np.linalg.norm(ax) * np.linalg.norm(y) + 1e-300
    return abs(np.vdot(x, ay) - np.vdot(ax, y)) <= rtol * scale


def sym_lanczos_solve(
    A: LinearOperator,
    b: np.ndarray,
    n: int,
    mode: str = "cg",
    keep: Union[str, int] = "full",
    boundary_cols: tuple[int, ...] = (),
    tol: float = 1e-8,
    check_hermitian: bool = True,
    reorth: bool = False,
) -> tuple[Union[LanczosData, LanczosCapture], SolveReport]:
    """Symmetric Lanczos run of ``n`` steps with a CG- or MINRES-type solve.

    ``mode='cg'`` solves the tridiagonal Galerkin system ``T y = V^H b``
    (structurally ``|b| e_1``); ``mode='minres'`` minimizes over the
    extended system via Givens rotations.  ``keep=J`` stores only every
    J-th basis column; the solution is then deferred to the
    short-representation solves and the report carries ``x = 0``.

    ``reorth=True`` re-orthogonalizes every new column against all stored
    ones (twice), producing reference payloads with machine-level
    orthogonality at quadratic cost; plain two-term recursion otherwise.
    """
    if mode not in ("cg", "minres"):
        raise ValueError("mode must be 'cg' or 'minres'")
    if check_hermitian and not hermitian_probe(A):
        raise ValueError("operator failed the Hermitian probe; use bicg_bilanczos")
    if reorth and keep != "full":
        raise ValueError("reorthogonalized runs keep all columns")
    N = A.dim
    b = np.asarray(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        raise ValueError("zero right-hand side")
    stride = None if keep == "full" else int(keep)

    dtype = np.result_type(b, 1.0)
    t = _tridiag_band(n)
    v_prev = np.zeros(N, dtype=dtype)
    v = b.astype(dtype) / bnorm
    beta = 0.0
    cols: list[np.ndarray] = []
    sampled: list[np.ndarray] = []
    boundary: dict[int, np.ndarray] = {}
    rec = Recorder(A, b, every_mv=_record_every_mv(N))
    record_stride = 1 if _record_every_mv(N) else max(1, n // 25)

    n_run = n
    v_next = None
    for i in range(1, n + 1):
        if stride is None:
            cols.append(v)
        else:
            if (i - 1) % stride == 0:
                sampled.append(v)
            if i in boundary_cols:
                boundary[i] = v.copy()
        av = A.apply(v)
        alpha = np.vdot(v, av).real
        w = av - alpha * v - beta * v_prev
        if reorth and cols:
            basis = np.column_stack(cols)
            for _ in range(2):
                w -= basis @ (basis.conj().T @ w)
        t.set(i - 1, i - 1, alpha)
        beta_next = float(np.linalg.norm(w))
        if beta_next <= BREAKDOWN_RTOL * max(np.linalg.norm(av), 1e-300):
            n_run = i  # happy breakdown: invariant subspace reached
            v_next = w
            break
        t.set(i, i - 1, beta_next)
        if i < n:
            t.set(i - 1, i, beta_next)
        v_prev, v = v, w / beta_next
        beta = beta_next
        if stride is None and (i % record_stride == 0):
            try:
                rec.record(_lanczos_iterate(cols, t, bnorm, i, mode))
            except BreakdownError:
                pass  # transiently singular leading system; final solve decides
    if v_next is None:
        v_next = v  # column n+1

    n = n_run
    t = _trim_band(t, n)
    if stride is None:
        vmat = np.column_stack(cols[:n])
        x = _lanczos_iterate(cols[:n], t, bnorm, n, mode)
        defect = float(np.max(np.abs(vmat.conj().T @ vmat - np.eye(n))))
        data: Union[LanczosData, LanczosCapture] = LanczosData(
            V=vmat, v_next=v_next, T_band=t, n=n, ortho_defect=defect
        )
        warnings = []
    else:
        x = np.zeros(N, dtype=dtype)
        defect = float("nan")
        data = LanczosCapture(
            Vt=np.column_stack(sampled),
            J=stride,
            n=n,
            T_band=t,
            v_next=v_next,
            boundary=boundary,
        )
        warnings = ["strided capture: solution deferred to short-rep solves"]
    res = rec.record(x, force=True)
    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=bool(res <= tol * bnorm) and stride is None,
        mv_total=rec.mv,
        rd_total=n,
        method=f"lanczos-{mode}",
        defects={"orthogonality": defect},
        warnings=warnings,
        markers=rec.markers,
    )
    return data, report


def _lanczos_iterate(cols, t: BandedMatrix, bnorm: float, m: int, mode: str):
    """Galerkin or minimum-residual iterate from the first m Lanczos columns."""
    vmat = np.column_stack(cols[:m])
    rhs = np.zeros(m)
    rhs[0] = bnorm
    if mode == "cg":
        ab = np.zeros((3, m))
        for j in range(m):
            ab[1, j] = t.get(j, j).real
            if j > 0:
                ab[0, j] = t.get(j - 1, j).real
            if j + 1 < m:
                ab[2, j] = t.get(j + 1, j).real
        try:
            y = scipy.linalg.solve_banded((1, 1), ab, rhs)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise BreakdownError(
                "tridiagonal Galerkin system is singular; use mode='minres'", m
            ) from exc
        tm = _tbar_dense(t, m)[:m, :m]
        if np.linalg.norm(tm @ y - rhs) > 1e-8 * bnorm:
            raise BreakdownError(
                "tridiagonal Galerkin system is singular; use mode='minres'", m
            )
        return vmat @ y
    rhs_bar = np.zeros(m + 1)
    rhs_bar[0] = bnorm
    y, _ = hessenberg_lstsq(_tbar_dense(t, m), rhs_bar)
    return vmat @ y


def bicg_bilanczos(
    A: LinearOperator,
    b: np.ndarray,
    w1: Optional[np.ndarray] = None,
    n: int = 50,
    keep: Union[str, int] = "full",
    boundary_cols: tuple[int, ...] = (),
    extend_steps: int = 0,
    tol: float = 1e-8,
    reorth: bool = False,
) -> tuple[Union[BiLanczosData, BiLanczosCapture], SolveReport]:
    """Two-sided Lanczos run with preimages and a BiCG-type solution.

    The search-space basis ``U`` starts parallel to ``b`` (``w1`` defaults
    to the same direction); images have unit length and the left basis is
    scaled so that ``W^H V = I``.  Each recursion step costs one product
    with ``A`` and one with ``A^H``; iterates are the oblique projections
    ``x_m = U_m (W_m^H b)``, which coincide with CG iterates when ``A`` is
    Hermitian positive definite and ``w1`` is parallel to ``b``.

    ``keep=J`` stores every J-th column only (plus ``boundary_cols``,
    1-based) and defers the solution to short-representation solves.
    ``extend_steps=e`` continues the recursion, retaining image/preimage
    columns ``n+2 .. n+1+e`` for orthogonality-preserving post-iterations.
    ``reorth=True`` re-biorthogonalizes each new pair against all stored
    columns (reference payloads; quadratic cost).
    """
    if not A.has_adjoint:
        raise ValueError("bicg_bilanczos needs adjoint products")
    if reorth and keep != "full":
        raise ValueError("reorthogonalized runs keep all columns")
    N = A.dim
    b = np.asarray(b)
    bnorm = float(np.linalg.norm(b))
    stride = None if keep == "full" else int(keep)
    dtype = np.result_type(b, 1.0)
    rec = Recorder(A, b, every_mv=_record_every_mv(N))

    u = b.astype(dtype) / bnorm
    v_img = A.apply(u)
    gamma = float(np.linalg.norm(v_img))
    if gamma <= BREAKDOWN_RTOL * bnorm:
        raise BreakdownError("A b vanished; cannot start the recursion", 0)
    v = v_img / gamma
    u = u / gamma
    wdir = b if w1 is None else np.asarray(w1)
    eta = np.vdot(wdir, v)
    if abs(eta) <= BREAKDOWN_RTOL * np.linalg.norm(wdir):
        raise BreakdownError("left start vector is orthogonal to the first image", 0)
    w = wdir.astype(dtype) / np.conj(eta)

    total = n + extend_steps
    t = _tridiag_band(total)
    us: list[np.ndarray] = []
    vs: list[np.ndarray] = []
    ws: list[np.ndarray] = []
    ext_u: list[np.ndarray] = []
    ext_v: list[np.ndarray] = []
    nxt: dict[str, np.ndarray] = {}
    sampled_u: list[np.ndarray] = []
    sampled_v: list[np.ndarray] = []
    sampled_w: list[np.ndarray] = []
    boundary: dict[int, tuple] = {}
    y: list = []  # growing W^H b
    record_stride = 1 if _record_every_mv(N) else max(1, n // 25)

    def keep_column(i: int, uc, vc, wc) -> None:
        if i <= n:
            if stride is None:
                us.append(uc)
                vs.append(vc)
                ws.append(wc)
            else:
                if (i - 1) % stride == 0:
                    sampled_u.append(uc)
                    sampled_v.append(vc)
                    sampled_w.append(wc)
                if i in boundary_cols:
                    boundary[i] = (uc.copy(), vc.copy(), wc.copy())
        elif i == n + 1:
            nxt["u"], nxt["v"], nxt["w"] = uc, vc, wc
        else:
            ext_u.append(uc)
            ext_v.append(vc)

    u_prev = np.zeros(N, dtype=dtype)
    w_prev = np.zeros(N, dtype=dtype)
    t_sup = 0.0  # pending superdiagonal entry t[i-1, i]
    t_next_sup = 0.0
    breakdown_at = None
    for i in range(1, total + 2):
        keep_column(i, u, v, w)
        if i <= n:
            y.append(np.vdot(w, b))
        if i == total + 1:
            break
        aw = A.adjoint_apply(w)
        alpha = np.vdot(aw, v)
        t.set(i - 1, i - 1, alpha)
        u_tilde = v - alpha * u - t_sup * u_prev
        v_tilde = A.apply(u_tilde)
        w_tilde = aw - np.conj(alpha) * w
        if i > 1:
            w_tilde = w_tilde - np.conj(t.get(i - 1, i - 2)) * w_prev
        if reorth and us:
            ub, vb, wb = (np.column_stack(m) for m in (us, vs, ws))
            for _ in range(2):
                coef = wb.conj().T @ v_tilde
                v_tilde = v_tilde - vb @ coef
                u_tilde = u_tilde - ub @ coef
                w_tilde = w_tilde - wb @ (vb.conj().T @ w_tilde)
        delta = np.vdot(w_tilde, v_tilde)
        vt_norm = float(np.linalg.norm(v_tilde))
        if (
            vt_norm <= BREAKDOWN_RTOL * max(np.linalg.norm(v), 1e-300)
            or abs(delta)
            <= BREAKDOWN_RTOL * max(np.linalg.norm(w_tilde) * vt_norm, 1e-300)
        ):
            breakdown_at = i
            break
        t_sub = vt_norm
        t.set(i, i - 1, t_sub)
        t_sup = delta / t_sub
        if i == n:
            t_next_sup = t_sup
        if i < total:
            t.set(i - 1, i, t_sup)
        u_prev, w_prev = u, w
        u = u_tilde / t_sub
        v = v_tilde / t_sub
        w = w_tilde / np.conj(t_sup)
        if stride is None and i <= n and (i % record_stride == 0 or i == n):
            rec.record(np.column_stack(us[:i]) @ np.asarray(y[:i]))

    if breakdown_at is not None and breakdown_at < n:
        raise BreakdownError(
            f"bi-orthogonality breakdown at step {breakdown_at}", breakdown_at
        )

    m = n
    t_out = _trim_band(t, m)
    warnings = []
    if breakdown_at == n:
        # first n columns are complete; only the continuation degenerated
        # (at full depth the search space is exhausted and this is expected)
        nxt.setdefault("u", u_tilde)
        nxt.setdefault("v", v_tilde)
        nxt.setdefault("w", w_tilde)
        warnings.append(
            f"recursion terminated at step {n}: continuation columns are degenerate"
        )
    elif breakdown_at is not None:
        warnings.append(
            f"extension stopped early at step {breakdown_at}; "
            f"{len(ext_v)} extension columns kept"
        )
    if stride is None:
        umat = np.column_stack(us)
        x = umat @ np.asarray(y)
    else:
        x = np.zeros(N, dtype=dtype)
        warnings.append("strided capture: solution deferred to short-rep solves")
    res = rec.record(x, force=True)
    converged = bool(res <= tol * bnorm) and stride is None

    if stride is None:
        vmat = np.column_stack(vs)
        wmat = np.column_stack(ws)
        defect = float(np.max(np.abs(wmat.conj().T @ vmat - np.eye(m))))
        data: Union[BiLanczosData, BiLanczosCapture] = BiLanczosData(
            U=umat,
            V=vmat,
            W=wmat,
            u_next=nxt["u"],
            v_next=nxt["v"],
            w_next=nxt["w"],
            T_band=t_out,
            n=m,
            ext_V=np.column_stack(ext_v) if ext_v else np.zeros((N, 0), dtype=dtype),
            ext_U=np.column_stack(ext_u) if ext_u else np.zeros((N, 0), dtype=dtype),
            biorth_defect=defect,
            t_next_sup=t_next_sup,
        )
    else:
        defect = float("nan")
        data = BiLanczosCapture(
            Ut=np.column_stack(sampled_u),
            Vt=np.column_stack(sampled_v),
            Wt=np.column_stack(sampled_w),
            J=stride,
            n=m,
            T_band=t_out,
            u_next=nxt["u"],
            v_next=nxt["v"],
            w_next=nxt["w"],
            boundary=boundary,
        )
    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=converged,
        mv_total=rec.mv,
        rd_total=m,
        method="bicg",
        defects={"biorthogonality": defect},
        warnings=warnings,
        markers=rec.markers,
    )
    return data, report
