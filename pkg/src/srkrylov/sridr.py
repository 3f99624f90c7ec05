"""Sonneveld-space recycling: IDR(s), SRIDR and the MI09 comparison variant.

A plain IDR(s) run restricts residual and auxiliary vectors into nested
Sonneveld spaces, one level per cycle at ``s + 1`` operator products.  The
recycling payload captured at a cycle boundary (shadow basis, auxiliary
vectors with preimages, and the relaxation list) lets later solves repeat
the level climb at one product per cycle, reusing the recorded relaxation
of each level.  MI09 reuses shadow and auxiliary data but picks its
relaxations freshly and never skips the auxiliary loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .core import BREAKDOWN_RTOL, BreakdownError, LinearOperator, reduced_qr
from .report import Recorder, SolveReport
from .solvers import _record_every_mv

__all__ = [
    "SonneveldRecycleData",
    "idr_s_solve",
    "mi09_solve",
    "sridr_solve",
    "throw_columns",
    "sonneveld_membership_check",
    "save_recycle_data",
    "load_recycle_data",
]


@dataclass
class SonneveldRecycleData:
    """Recycling payload of an IDR(s) run, captured at a cycle boundary.

    Holds the shadow basis ``P``, the auxiliary images ``V_aux`` with
    preimages ``U_aux`` (``A U_aux = V_aux``), and the relaxations
    ``omegas[0:Jstar]`` that define the recycled space ladder.  Treated as
    immutable once captured; safe to share across solves.
    """

    P: np.ndarray
    V_aux: np.ndarray
    U_aux: np.ndarray
    omegas: list
    Jstar: int
    seed: Optional[int] = None

    @property
    def s(self) -> int:
        return self.P.shape[1]

    def validate(self, A: LinearOperator, rtol: float = 1e-8) -> None:
        if len(self.omegas) < self.Jstar:
            raise ValueError("fewer relaxations than declared levels")
        if any(abs(w) == 0.0 for w in self.omegas):
            raise ValueError("zero relaxation in payload")
        if np.linalg.matrix_rank(self.P) < self.s:
            raise ValueError("shadow basis is rank deficient")
        for j in range(self.V_aux.shape[1]):
            img = A.apply_uncounted(self.U_aux[:, j])
            err = np.linalg.norm(img - self.V_aux[:, j])
            if err > rtol * max(np.linalg.norm(self.V_aux[:, j]), 1e-300):
                raise ValueError(f"auxiliary preimage {j} violates A U = V")


class _OmegaChooser:
    """Relaxation policies for the dimension-reduction step.

    ``omega_opt`` minimizes the new residual norm; when the angle between
    residual and its image drops below ``kappa`` the relaxation is enlarged
    by ``kappa / cos`` (the classic maintaining-convergence factor), which
    keeps consecutive space levels well separated.  ``kappa=0`` disables
    the safeguard.
    """

    def __init__(
        self,
        policy: str = "omega_opt",
        forced: Optional[Sequence[float]] = None,
        bounds: Optional[tuple[float, float]] = None,
        fallback: Optional[Callable[[], float]] = None,
        kappa: float = 0.7,
    ):
        if policy not in ("omega_opt", "richardson"):
            raise ValueError(f"unknown relaxation policy {policy!r}")
        if policy == "richardson" and bounds is None:
            raise ValueError("richardson policy needs (lambda_min, lambda_max)")
        self.policy = policy
        self.forced = list(forced) if forced is not None else None
        self.bounds = bounds
        self.fallback = fallback
        self.kappa = kappa
        self.count = 0

    def __call__(self, t: np.ndarray, v: np.ndarray) -> float:
        self.count += 1
        if self.forced is not None and self.count <= len(self.forced):
            return self.forced[self.count - 1]
        if self.policy == "richardson":
            lo, hi = self.bounds
            return 2.0 / (hi + lo)
        tt = np.vdot(t, t)
        scale = np.linalg.norm(v) * np.sqrt(abs(tt)) + 1e-300
        if abs(tt) == 0.0:
            omega = 0.0
        else:
            omega = np.vdot(t, v) / tt
        if abs(omega) * np.sqrt(abs(tt)) <= BREAKDOWN_RTOL * scale or omega == 0.0:
            if self.fallback is None:
                raise BreakdownError("degenerate relaxation and no fallback")
            return self.fallback()
        if self.kappa:
            rho = abs(np.vdot(t, v)) / (
                np.sqrt(abs(tt)) * np.linalg.norm(v) + 1e-300
            )
            if rho < self.kappa:
                omega *= self.kappa / rho
        if np.isrealobj(t) and np.isrealobj(v):
            return float(np.real(omega))
        return omega


def _norm1_probe(A: LinearOperator, seed: int = 0) -> float:
    """Cheap 1-norm estimate used only by the relaxation fallback."""
    rng = np.random.default_rng(seed)
    z = rng.choice([-1.0, 1.0], size=A.dim)
    return float(np.linalg.norm(A.apply_uncounted(z), 1) / A.dim)


def _solve_small(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        raise BreakdownError(
            "P^H V is singular; reduce the payload with throw_columns"
        ) from exc


def _full_idr_cycle(A, P, x, r, U, G, M, omega, chooser, rec, record_every):
    """One biorthogonalized IDR(s) cycle: s auxiliary products, one for r.

    Rebuilds the auxiliary pairs column by column with the stored
    relaxation, keeps each new image orthogonal against the leading shadow
    vectors, peels the residual onto the shadow complement, then applies a
    freshly chosen relaxation.  Returns that relaxation.
    """
    s = P.shape[1]
    f = P.conj().T @ r
    for k in range(s):
        c = _solve_small(M[k:, k:], f[k:])
        v = r - G[:, k:] @ c
        U[:, k] = U[:, k:] @ c + omega * v
        G[:, k] = A.apply(U[:, k])
        for i in range(k):
            alpha = np.vdot(P[:, i], G[:, k]) / M[i, i]
            G[:, k] -= alpha * G[:, i]
            U[:, k] -= alpha * U[:, i]
        M[:k, k] = 0.0
        M[k:, k] = P[:, k:].conj().T @ G[:, k]
        mkk = M[k, k]
        if abs(mkk) <= BREAKDOWN_RTOL * max(
            np.linalg.norm(P[:, k]) * np.linalg.norm(G[:, k]), 1e-300
        ):
            raise BreakdownError(
                "P^H V is singular; reduce the payload with throw_columns", k
            )
        beta = f[k] / mkk
        r -= beta * G[:, k]
        x += beta * U[:, k]
        if k + 1 < s:
            f[k + 1 :] -= beta * M[k + 1 :, k]
        f[k] = 0.0
        if record_every:
            rec.record(x)
    t = A.apply(r)
    omega_new = chooser(t, r)
    x += omega_new * r
    r -= omega_new * t
    if record_every:
        rec.record(x)
    return omega_new


def idr_s_solve(
    A: LinearOperator,
    b: np.ndarray,
    s: int,
    tol: float = 1e-8,
    maxit: int = 1000,
    seed: int = 0,
    relax_policy: str = "omega_opt",
    P: Optional[np.ndarray] = None,
    capture_cycles: Sequence[int] = (),
    replace_every: int = 20,
    omega_bounds: Optional[tuple[float, float]] = None,
    forced_omegas: Optional[Sequence[float]] = None,
    kappa: float = 0.7,
) -> tuple[SolveReport, SonneveldRecycleData, dict[int, SonneveldRecycleData]]:
    """Biorthogonalized IDR(s) from a zero initial guess.

    Each cycle costs ``s + 1`` operator products and orthogonalizes the
    residual against ``s`` further test-space dimensions; ``maxit`` bounds
    the number of cycles.  The shadow basis ``P`` defaults to a seeded
    orthonormalized Gaussian block.  Cyclic residual replacements (counted)
    curb drift every ``replace_every`` cycles and at capture boundaries.

    Returns the report, the payload captured at the final cycle boundary,
    and payloads for every boundary listed in ``capture_cycles``.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    N = A.dim
    b = np.asarray(b)
    dtype = np.result_type(b, 1.0)
    if P is None:
        rng = np.random.default_rng(seed)
        P, _ = reduced_qr(rng.standard_normal((N, s)))
    P = np.asarray(P)
    if P.shape != (N, s):
        raise ValueError("shadow basis must be N x s")
    if np.linalg.matrix_rank(P) < s:
        raise ValueError("shadow basis is rank deficient")

    chooser = _OmegaChooser(
        relax_policy,
        forced=forced_omegas,
        bounds=omega_bounds,
        fallback=lambda: 1.0 / _norm1_probe(A, seed),
        kappa=kappa,
    )
    rec = Recorder(A, b, every_mv=_record_every_mv(N))
    record_every = _record_every_mv(N)
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm

    x = np.zeros(N, dtype=dtype)
    r = b.astype(dtype).copy()
    U = np.zeros((N, s), dtype=dtype)
    G = np.zeros((N, s), dtype=dtype)
    M = np.eye(s, dtype=dtype)
    omega = 1.0
    omegas: list = []
    captures: dict[int, SonneveldRecycleData] = {}

    rec.record(x)
    converged = False
    cycles = 0
    for cycle in range(1, maxit + 1):
        omega = _full_idr_cycle(A, P, x, r, U, G, M, omega, chooser, rec, record_every)
        omegas.append(omega)
        cycles = cycle
        if cycle % replace_every == 0 or cycle in capture_cycles:
            r = b - A.apply(x)  # counted residual replacement
        res = rec.record(x, force=True)
        if cycle in capture_cycles:
            captures[cycle] = SonneveldRecycleData(
                P.copy(), G.copy(), U.copy(), list(omegas), cycle, seed
            )
            rec.markers[rec.mv] = "capture"
        if res <= target:
            converged = True
            break

    payload = SonneveldRecycleData(P.copy(), G.copy(), U.copy(), list(omegas), cycles, seed)
    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=converged,
        mv_total=rec.mv,
        rd_total=s * cycles,
        method=f"idr({s})",
        markers=rec.markers,
    )
    return report, payload, captures


def mi09_solve(
    A: LinearOperator,
    b: np.ndarray,
    recycle: Optional[SonneveldRecycleData],
    s: int,
    tol: float = 1e-8,
    maxit: int = 1000,
    relax_policy: str = "omega_opt",
    forced_omegas: Optional[Sequence[float]] = None,
    aux_updates: bool = True,
    seed: int = 0,
    omega_bounds: Optional[tuple[float, float]] = None,
    kappa: float = 0.7,
) -> SolveReport:
    """IDR(s) seeded with recycled shadow and auxiliary vectors.

    All relaxations are chosen freshly (or taken from ``forced_omegas``)
    and the auxiliary loop is never skipped, so every cycle costs
    ``s + 1`` products.  Without recycle data this is plain IDR(s).

    ``aux_updates=False`` freezes the auxiliary vectors, reducing each
    cycle to a single projection plus relaxation (one product); this
    diagnostic mode exposes the geometry that makes free relaxations fail
    to terminate where recycled ones do.
    """
    N = A.dim
    b = np.asarray(b)
    if recycle is None:
        report, _, _ = idr_s_solve(
            A,
            b,
            s,
            tol=tol,
            maxit=maxit,
            seed=seed,
            relax_policy=relax_policy,
            forced_omegas=forced_omegas,
            omega_bounds=omega_bounds,
            kappa=kappa,
        )
        report.method = f"mi09({s})"
        return report
    if recycle.s != s:
        raise ValueError("payload width does not match s")

    dtype = np.result_type(b, 1.0)
    chooser = _OmegaChooser(
        relax_policy,
        forced=forced_omegas,
        bounds=omega_bounds,
        fallback=lambda: 1.0 / _norm1_probe(A, seed),
        kappa=kappa,
    )
    rec = Recorder(A, b, every_mv=_record_every_mv(N))
    record_every = _record_every_mv(N)
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm

    x = np.zeros(N, dtype=dtype)
    r = b.astype(dtype).copy()
    P = recycle.P
    U = recycle.U_aux.astype(dtype).copy()
    G = recycle.V_aux.astype(dtype).copy()
    M = P.conj().T @ G
    omega = 1.0

    rec.record(x)
    converged = False
    cycles = 0
    for cycle in range(1, maxit + 1):
        cycles = cycle
        if aux_updates:
            omega = _full_idr_cycle(
                A, P, x, r, U, G, M, omega, chooser, rec, record_every
            )
        else:
            gamma = _solve_small(M, P.conj().T @ r)
            x += U @ gamma
            r -= G @ gamma
            res = rec.record(x, force=True)
            if res <= target:
                converged = True
                break
            t = A.apply(r)
            omega = chooser(t, r)
            x += omega * r
            r -= omega * t
        res = rec.record(x, force=True)
        if res <= target:
            converged = True
            break

    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=converged,
        mv_total=rec.mv,
        rd_total=s * cycles,
        method=f"mi09({s})",
        markers=rec.markers,
    )
    return report


def sridr_solve(
    A: LinearOperator,
    b: np.ndarray,
    recycle: SonneveldRecycleData,
    J: int,
    tol: float = 1e-8,
    relax_policy: str = "omega_opt",
    alternating: bool = False,
    omega_bounds: Optional[tuple[float, float]] = None,
    forced_omegas: Optional[Sequence[float]] = None,
    replace_every: int = 20,
    reuse_order: Optional[Sequence[int]] = None,
    kappa: float = 0.7,
) -> tuple[SolveReport, SonneveldRecycleData]:
    """Sonneveld-space recycling solve from a zero initial guess.

    Runs up to ``J`` cycles.  While recorded relaxations remain, a cycle
    is a single projection against the held auxiliary pairs followed by
    the recycled relaxation and an exact residual refresh: one counted
    product per cycle.  Beyond the recycled depth, full IDR(s) cycles with
    fresh relaxations (``relax_policy``, or ``forced_omegas``) take over
    and extend the payload.

    ``relax_policy`` governs the freely chosen relaxations (cycles beyond
    the recycled depth, and the interleaved cycles of the alternating
    mode): ``omega_opt`` (residual minimizing), ``richardson`` (constant
    from ``omega_bounds``), or ``alternating`` as a shorthand for
    ``omega_opt`` with ``alternating=True``.  Recorded relaxations are
    always reused for the recycled cycles themselves.

    ``alternating=True`` interleaves freely relaxed one-product cycles
    between the recycled ones, trading half the products-per-level ratio
    for potentially smaller residuals.  ``reuse_order`` permutes the order
    in which the recorded relaxations are consumed; the final recycled
    space is order-invariant, but boundary-captured auxiliaries live one
    level below the last relaxation, so only the leading ``Jstar - 1``
    entries permute freely (keep the last one last).

    With ``J = 0`` only the oblique projection is applied.
    """
    N = A.dim
    b = np.asarray(b)
    dtype = np.result_type(b, 1.0)
    if relax_policy == "alternating":
        relax_policy = "omega_opt"
        alternating = True
    s = recycle.s
    jstar = recycle.Jstar
    omega_seq = list(recycle.omegas[:jstar])
    if reuse_order is not None:
        if sorted(reuse_order) != list(range(jstar)):
            raise ValueError("reuse_order must permute range(Jstar)")
        omega_seq = [omega_seq[i] for i in reuse_order]

    chooser = _OmegaChooser(
        relax_policy,
        forced=forced_omegas,
        bounds=omega_bounds,
        fallback=lambda: 1.0 / _norm1_probe(A),
        kappa=kappa,
    )
    rec = Recorder(A, b, every_mv=_record_every_mv(N))
    record_every = _record_every_mv(N)
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm

    P = recycle.P
    U_hold = recycle.U_aux
    G_hold = recycle.V_aux
    aux_live = bool(np.any(G_hold))
    lu = None
    if jstar > 0 or J == 0:
        M_hold = P.conj().T @ G_hold
        cond = np.linalg.cond(M_hold)
        if not np.isfinite(cond) or cond > 1.0 / BREAKDOWN_RTOL:
            raise BreakdownError(
                "P^H V is singular; reduce the payload with throw_columns"
            )
        lu = scipy.linalg.lu_factor(M_hold)

    x = np.zeros(N, dtype=dtype)
    r = b.astype(dtype).copy()
    rec.record(x)
    res = rec.rows[-1][1]
    converged = res <= target

    if J == 0:
        gamma = scipy.linalg.lu_solve(lu, P.conj().T @ r)
        x += U_hold @ gamma
        r -= G_hold @ gamma
        res = rec.record(x, force=True)
        report = SolveReport(
            x=x,
            history=rec.rows,
            converged=bool(res <= target),
            mv_total=rec.mv,
            rd_total=s,
            method=f"sridr({s})",
            markers=rec.markers,
        )
        return report, recycle

    level = 0
    cycles = 0
    rd_levels = 0
    omegas_out = list(omega_seq)
    mutated = False
    U = G = M = None
    omega_current = 1.0

    while not converged and cycles < J:
        cycles += 1
        if level < jstar:
            arbitrary = alternating and cycles % 2 == 0
            gamma = scipy.linalg.lu_solve(lu, P.conj().T @ r)
            x += U_hold @ gamma
            r -= G_hold @ gamma
            if np.linalg.norm(r) <= target:
                res = rec.record(x, force=True)
                converged = res <= target
                if converged:
                    break
            if arbitrary:
                # free relaxation keeps the level: the residual only moves
                # into a fresh side space of the current one
                t = A.apply(r)
                omega_current = chooser(t, r)
                x += omega_current * r
                r -= omega_current * t
            else:
                omega_current = omega_seq[level]
                level += 1
                rd_levels += 1
                x += omega_current * r
                r = b - A.apply(x)  # recycled relaxation: refresh exactly
            res = rec.record(x, force=True)
            converged = res <= target
        else:
            if U is None:
                if aux_live:
                    U = U_hold.astype(dtype).copy()
                    G = G_hold.astype(dtype).copy()
                    M = P.conj().T @ G
                else:
                    # degenerate payload: behave exactly like a fresh IDR run
                    U = np.zeros((N, s), dtype=dtype)
                    G = np.zeros((N, s), dtype=dtype)
                    M = np.eye(s, dtype=dtype)
                mutated = True
            omega_current = _full_idr_cycle(
                A, P, x, r, U, G, M, omega_current, chooser, rec, record_every
            )
            omegas_out.append(omega_current)
            rd_levels += 1
            if (cycles - jstar) % replace_every == 0:
                r = b - A.apply(x)
            res = rec.record(x, force=True)
            converged = res <= target

    report = SolveReport(
        x=x,
        history=rec.rows,
        converged=bool(converged),
        mv_total=rec.mv,
        rd_total=s * rd_levels,
        method=f"sridr({s})",
        markers=rec.markers,
    )
    if mutated:
        payload_out = SonneveldRecycleData(
            P.copy(), G.copy(), U.copy(), omegas_out, len(omegas_out), recycle.seed
        )
    else:
        payload_out = recycle
    return report, payload_out


def throw_columns(
    recycle: SonneveldRecycleData, nu: np.ndarray, eta: np.ndarray
) -> SonneveldRecycleData:
    """Shrink a payload to fewer shadow/auxiliary columns.

    ``P`` is narrowed by ``eta`` and the auxiliary pairs by ``nu`` (both
    ``s x s_check`` with full column rank).  Dropping shadow directions
    only enlarges the shadow complement, so the recycled-space membership
    of the remaining auxiliary vectors survives; the relaxations carry
    over unchanged.
    """
    nu = np.asarray(nu)
    eta = np.asarray(eta)
    s = recycle.s
    if nu.shape[0] != s or eta.shape[0] != s or nu.shape[1] != eta.shape[1]:
        raise ValueError("nu and eta must both be s x s_check")
    s_check = nu.shape[1]
    if s_check > s:
        raise ValueError("cannot enlarge the payload")
    p_new = recycle.P @ eta
    v_new = recycle.V_aux @ nu
    u_new = recycle.U_aux @ nu
    if (
        np.linalg.matrix_rank(p_new) < s_check
        or np.linalg.matrix_rank(v_new) < s_check
    ):
        raise ValueError("rank loss after column reduction")
    return SonneveldRecycleData(
        p_new, v_new, u_new, list(recycle.omegas), recycle.Jstar, recycle.seed
    )


def sonneveld_membership_check(
    v: np.ndarray,
    recycle: SonneveldRecycleData,
    A: LinearOperator,
    level: Optional[int] = None,
) -> float:
    """Brute-force recycled-space membership defect of a vector.

    Builds an orthonormal basis of the recycled test space (the product of
    the adjoint relaxation polynomial with the block Krylov space of the
    shadow basis under the adjoint) by explicit column construction and
    returns the relative size of ``v``'s component inside it.  Zero means
    the vector lies in the recycled space of the given level.  Dense and
    meant for small problems.
    """
    v = np.asarray(v)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    if level is None:
        level = recycle.Jstar
    if level == 0:
        return 0.0
    omegas = list(recycle.omegas[:level])

    cols = []
    for l in range(recycle.s):
        w = recycle.P[:, l].astype(complex if np.iscomplexobj(v) else float)
        ks = [w]
        for _ in range(level - 1):
            ks.append(A.adjoint_apply_uncounted(ks[-1]))
        cols.extend(ks)
    null = scipy.linalg.null_space(np.column_stack(cols).conj().T)
    if null.shape[1] == 0:
        return 1.0  # the space is {0}: any nonzero vector is fully outside
    members = null
    for omega in omegas:
        members = members - omega * np.column_stack(
            [A.apply_uncounted(members[:, j]) for j in range(members.shape[1])]
        )
    q = scipy.linalg.orth(members)
    return float(np.linalg.norm(v - q @ (q.conj().T @ v)) / nv)


_MAGIC = b"SRID1"


def save_recycle_data(path, recycle: SonneveldRecycleData) -> None:
    """Flat binary payload container: dims header, column-major matrices."""
    n, s = recycle.P.shape
    omegas = np.asarray(recycle.omegas, dtype=np.float64)
    complex_ = any(
        np.iscomplexobj(m) for m in (recycle.P, recycle.V_aux, recycle.U_aux)
    )
    dt = np.complex128 if complex_ else np.float64
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<qqqqqq",
                n,
                s,
                recycle.Jstar,
                len(omegas),
                1 if complex_ else 0,
                recycle.seed if recycle.seed is not None else -1,
            )
        )
        for m in (recycle.P, recycle.V_aux, recycle.U_aux):
            fh.write(np.asarray(m, dtype=dt).tobytes(order="F"))
        fh.write(omegas.tobytes())


def load_recycle_data(path) -> SonneveldRecycleData:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValueError(f"bad payload magic {magic!r}")
        n, s, jstar, n_omega, complex_, seed = struct.unpack("<qqqqqq", fh.read(48))
        dt = np.complex128 if complex_ else np.float64
        nbytes = n * s * np.dtype(dt).itemsize
        mats = []
        for _ in range(3):
            mats.append(
                np.frombuffer(fh.read(nbytes), dtype=dt).reshape((n, s), order="F")
            )
        omegas = np.frombuffer(fh.read(8 * n_omega), dtype=np.float64)
    return SonneveldRecycleData(
        mats[0].copy(),
        mats[1].copy(),
        mats[2].copy(),
        list(omegas),
        int(jstar),
        None if seed == -1 else int(seed),
    )
