"""Preconditioned operator wrappers and symmetry-preserving recycling.

Fixed linear preconditioners compose directly into the operator: split
form replaces products with ``L^{-1} A R^{-1}``, left form with
``M^{-1} A``.  For Hermitian positive definite pairs the transformed-basis
recursion keeps the band matrix of the underlying orthonormal process
while iterating only with ``A`` and ``M^{-1}``; its basis is orthonormal
in the energy inner product of the preconditioner, and recycling solves
project new right-hand sides through exactly that basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .core import (
    BandedMatrix,
    BreakdownError,
    CsrMatrix,
    LinearOperator,
    MvCounter,
    BREAKDOWN_RTOL,
    hessenberg_lstsq,
)
from .report import Recorder, SolveReport
from .shortrep import ShortRepresentation, apply_V, apply_VH, build_short_rep, _uncounted_view
from .solvers import LanczosCapture, _tbar_dense, _tridiag_band, _trim_band

__all__ = [
    "PreconditionedOperator",
    "ZLanczosData",
    "wrap_precond",
    "z_lanczos",
    "rep_from_zlanczos",
    "srz_solve",
    "jacobi_solver",
    "symmetric_gauss_seidel_solver",
]


class PreconditionedOperator:
    """Operator view applying the preconditioned product.

    Base-operator applications land on the shared counter through the base
    operator itself; preconditioner solves are tallied separately on
    ``psolve_counter`` (counted paths only, diagnostics excluded).
    """

    def __init__(
        self,
        base: LinearOperator,
        left_solve: Optional[Callable] = None,
        right_solve: Optional[Callable] = None,
        mode: str = "left",
        left_solve_adjoint: Optional[Callable] = None,
        right_solve_adjoint: Optional[Callable] = None,
    ):
        if mode not in ("split", "left", "none"):
            raise ValueError("mode must be 'split', 'left' or 'none'")
        self.base = base
        self.dim = base.dim
        self.counter = base.counter
        self.mode = mode
        self.left_solve = left_solve
        self.right_solve = right_solve
        self.left_solve_adjoint = left_solve_adjoint
        self.right_solve_adjoint = right_solve_adjoint
        self.psolve_counter = MvCounter()

    @property
    def has_adjoint(self) -> bool:
        return self.base.has_adjoint

    def _fwd(self, x, counted):
        y = x
        if self.mode == "split" and self.right_solve is not None:
            y = self.right_solve(y)
            if counted:
                self.psolve_counter.add()
        y = self.base.apply(y) if counted else self.base.apply_uncounted(y)
        if self.mode in ("split", "left") and self.left_solve is not None:
            y = self.left_solve(y)
            if counted:
                self.psolve_counter.add()
        return y

    def _adj(self, x, counted):
        y = x
        if self.mode in ("split", "left") and self.left_solve is not None:
            if self.left_solve_adjoint is None:
                raise ValueError(
                    "adjoint products need an adjoint left preconditioner solve"
                )
            y = self.left_solve_adjoint(y)
            if counted:
                self.psolve_counter.add()
        y = self.base.adjoint_apply(y) if counted else self.base.adjoint_apply_uncounted(y)
        if self.mode == "split" and self.right_solve is not None:
            if self.right_solve_adjoint is None:
                raise ValueError(
                    "adjoint products need an adjoint right preconditioner solve"
                )
            y = self.right_solve_adjoint(y)
            if counted:
                self.psolve_counter.add()
        return y

    def apply(self, x):
        return self._fwd(x, counted=True)

    def adjoint_apply(self, x):
        return self._adj(x, counted=True)

    def apply_uncounted(self, x):
        return self._fwd(x, counted=False)

    def adjoint_apply_uncounted(self, x):
        return self._adj(x, counted=False)


def wrap_precond(
    A: LinearOperator,
    left_solve: Optional[Callable] = None,
    right_solve: Optional[Callable] = None,
    mode: str = "left",
    left_solve_adjoint: Optional[Callable] = None,
    right_solve_adjoint: Optional[Callable] = None,
) -> PreconditionedOperator:
    """Compose fixed linear preconditioner solves into an operator.

    ``mode='split'`` applies the two-sided product, ``mode='left'`` the
    left one, ``mode='none'`` returns a transparent wrapper.  Adjoint
    applications compose the adjoint solves in reverse order when they are
    provided.  For Hermitian solve callbacks the adjoints default to the
    callbacks themselves.
    """
    if left_solve_adjoint is None:
        left_solve_adjoint = left_solve
    if right_solve_adjoint is None:
        right_solve_adjoint = right_solve
    return PreconditionedOperator(
        A, left_solve, right_solve, mode, left_solve_adjoint, right_solve_adjoint
    )


@dataclass
class ZLanczosData:
    """Transformed-basis Lanczos data for the energy inner product.

    The basis is orthonormal with respect to the preconditioner
    (``Z^H M Z = I``) and satisfies the band recursion under the
    left-preconditioned operator.
    """

    Z: np.ndarray
    z_next: np.ndarray
    T_band: BandedMatrix
    n: int
    m_ortho_defect: float = float("nan")


def z_lanczos(
    A: LinearOperator,
    m_solve: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    n: int,
    keep: Union[str, int] = "full",
    m_apply: Optional[Callable] = None,
    reorth: bool = False,
) -> tuple[Union[ZLanczosData, LanczosCapture], SolveReport]:
    """Energy-orthonormal Lanczos recursion with an SPD preconditioner.

    One product with ``A`` and one preconditioner solve per step; the
    preconditioner images of the basis are carried along, so no products
    with the preconditioner itself are needed.  The band entries are the
    energy projections of the operator, hence real symmetric for Hermitian
    ``A``.  A vanishing energy norm is a happy breakdown and truncates the
    run.  ``m_apply`` is only used for the recorded orthonormality defect.
    """
    N = A.dim
    b = np.asarray(b)
    dtype = np.result_type(b, 1.0)
    rec = Recorder(A, b, every_mv=False)
    stride = None if keep == "full" else int(keep)

    if reorth and m_apply is None:
        raise ValueError("energy reorthogonalization needs m_apply")
    z_tilde = m_solve(b.astype(dtype))
    eta = np.vdot(z_tilde, b).real  # |z|_M^2 with M z = b
    if eta <= 0:
        raise BreakdownError("preconditioner is not positive definite on b")
    z = z_tilde / np.sqrt(eta)
    mz = b.astype(dtype) / np.sqrt(eta) if reorth else None
    z_prev = np.zeros(N, dtype=dtype)
    beta = 0.0

    t = _tridiag_band(n)
    cols: list[np.ndarray] = []
    mcols: list[np.ndarray] = []
    sampled: list[np.ndarray] = []
    n_run = n
    z_next = None
    for i in range(1, n + 1):
        if stride is None:
            cols.append(z)
            if reorth:
                mcols.append(mz)
        elif (i - 1) % stride == 0:
            sampled.append(z)
        az = A.apply(z)
        alpha = np.vdot(z, az).real
        t.set(i - 1, i - 1, alpha)
        w = m_solve(az) - alpha * z - beta * z_prev
        if reorth:
            zb = np.column_stack(cols)
            mb = np.column_stack(mcols)
            for _ in range(2):
                coef = mb.conj().T @ w
                w = w - zb @ coef
            mw = m_apply(w)
            beta_next_sq = np.vdot(w, mw).real
        else:
            # while the basis stays energy-orthonormal, |w|_M^2 telescopes
            # to <w, A z>; no product with the preconditioner is needed
            beta_next_sq = np.vdot(w, az).real
        w_norm = float(np.linalg.norm(w))
        if w_norm <= BREAKDOWN_RTOL * max(np.linalg.norm(az), 1e-300):
            n_run = i  # happy breakdown: invariant subspace reached
            z_next = w
            break
        if beta_next_sq <= 0.0:
            # telescoped energy norm lost positivity: the recursion data is
            # no longer trustworthy at this column, so rewind one column to
            # keep the returned decomposition consistent
            n_run = i - 1
            z_next = z
            if stride is None:
                cols.pop()
                if reorth:
                    mcols.pop()
            elif (i - 1) % stride == 0:
                sampled.pop()
            break
        beta_next = float(np.sqrt(beta_next_sq))
        t.set(i, i - 1, beta_next)
        if i < n:
            t.set(i - 1, i, beta_next)
        z_prev = z
        z = w / beta_next
        if reorth:
            mz = mw / beta_next
        beta = beta_next
    if z_next is None:
        z_next = z

    n = n_run
    t = _trim_band(t, n)
    defect = float("nan")
    if stride is None:
        zmat = np.column_stack(cols[:n])
        if m_apply is not None:
            gram = zmat.conj().T @ np.column_stack(
                [m_apply(zmat[:, j]) for j in range(n)]
            )
            defect = float(np.max(np.abs(gram - np.eye(n))))
        data: Union[ZLanczosData, LanczosCapture] = ZLanczosData(
            Z=zmat, z_next=z_next, T_band=t, n=n, m_ortho_defect=defect
        )
    else:
        data = LanczosCapture(
            Vt=np.column_stack(sampled), J=stride, n=n, T_band=t, v_next=z_next
        )
    # energy-Galerkin solution: T y = Z^H b (first coordinate only, since
    # z_1 is parallel to the preconditioned right-hand side in energy)
    x = np.zeros(N, dtype=dtype)
    if stride is None:
        rhs = zmat.conj().T @ b
        ab = np.zeros((3, n))
        for j in range(n):
            ab[1, j] = t.get(j, j).real
            if j > 0:
                ab[0, j] = t.get(j - 1, j).real
            if j + 1 < n:
                ab[2, j] = t.get(j + 1, j).real
        try:
            y = scipy.linalg.solve_banded((1, 1), ab, rhs)
            x = zmat @ y
        except np.linalg.LinAlgError:
            pass
    res = rec.record(x, force=True)
    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=bool(res <= 1e-8 * np.linalg.norm(b)),
        mv_total=rec.mv,
        rd_total=n,
        method="z-lanczos",
        defects={"m_orthonormality": defect},
        markers=rec.markers,
    )
    return data, report


def rep_from_zlanczos(
    data: Union[ZLanczosData, LanczosCapture], J: int
) -> ShortRepresentation:
    """Short representation of the energy-orthonormal basis.

    The driving operator of the Horner products is the left-preconditioned
    one, so callers pass the wrapped operator to the product routines.
    """
    if isinstance(data, LanczosCapture):
        if data.J != J:
            raise ValueError("capture stride does not match requested J")
        zt, z_next, n = data.Vt, data.v_next, data.n
        defect = float("nan")
    else:
        zt, z_next, n = data.Z[:, ::J], data.z_next, data.n
        defect = data.m_ortho_defect
    tsq = BandedMatrix(n, n, lower=1, upper=1)
    tsq.data = np.array(data.T_band.data[:, :n])
    if n >= 1:
        tsq.data[2, n - 1] = 0.0
    kmat, pi = build_short_rep(tsq, J)
    return ShortRepresentation(
        Vtilde=zt,
        K=kmat,
        Pi=pi,
        n=n,
        J=J,
        k=-(-n // J),
        band_T=data.T_band,
        last_col=z_next,
        source_defect=defect,
    )


def srz_solve(
    rep_Z: ShortRepresentation,
    A: LinearOperator,
    m_solve: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
) -> SolveReport:
    """Recycling solve through the energy-orthonormal representation.

    Solves the extended band least-squares system fed by the projections
    of the right-hand side onto the stored basis and lifts back through
    it; the Horner products run under the left-preconditioned operator.
    The projected residual of the result equals the attained least-squares
    minimum.
    """
    b = np.asarray(b)
    wrapped = wrap_precond(A, left_solve=m_solve, mode="left")
    rec = Recorder(A, b, every_mv=False)
    rec.record(np.zeros(A.dim, dtype=np.result_type(b, 1.0)))
    if rep_Z.last_col is None:
        raise ValueError("needs the stored continuation column")
    c = apply_VH(rep_Z, wrapped, b)
    c_bar = np.concatenate([c, [np.vdot(rep_Z.last_col, b)]])
    y, lstsq_res = hessenberg_lstsq(_tbar_dense(rep_Z.band_T, rep_Z.n), c_bar)
    x = apply_V(rep_Z, wrapped, y)
    r = b - A.apply(x)
    proj = apply_VH(rep_Z, _uncounted_view(wrapped), r)
    proj_bar = np.concatenate([proj, [np.vdot(rep_Z.last_col, r)]])
    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=bool(
            np.linalg.norm(r) <= 1e-8 * max(np.linalg.norm(b), 1e-300)
        ),
        mv_total=rec.mv,
        rd_total=rep_Z.n,
        method="srz",
        defects={
            "projected_residual": float(np.linalg.norm(proj_bar)),
            "lstsq_residual": float(lstsq_res),
        },
        markers=rec.markers,
    )
    rec.record(x, force=True)
    report.history = rec.rows
    return report


def jacobi_solver(a: CsrMatrix) -> Callable[[np.ndarray], np.ndarray]:
    """Diagonal preconditioner solve."""
    d = a.diagonal()
    if np.any(d == 0):
        raise ValueError("zero diagonal entry; cannot form the Jacobi solve")
    return lambda x: x / d


def symmetric_gauss_seidel_solver(a: CsrMatrix) -> Callable[[np.ndarray], np.ndarray]:
    """Symmetric Gauss-Seidel solve ``(D+L) D^{-1} (D+U) z = r``."""
    m = a.to_scipy()
    d = a.diagonal()
    if np.any(d == 0):
        raise ValueError("zero diagonal entry; cannot form the SGS solve")
    lower = scipy.sparse.tril(m, k=0).tocsr()
    upper = scipy.sparse.triu(m, k=0).tocsr()

    def solve(r):
        y = scipy.sparse.linalg.spsolve_triangular(lower, r, lower=True)
        y = d * y
        return scipy.sparse.linalg.spsolve_triangular(upper, y, lower=False)

    return solve
