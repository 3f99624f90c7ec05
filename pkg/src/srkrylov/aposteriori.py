"""Orthogonality-preserving post-iterations after a recycling solve.

A recycling solution leaves the residual orthogonal to the stored left
space.  Restarting a conventional solver from it would destroy that
property; instead, dimension-reduction cycles whose first shadow vector is
the continuation column of the left basis keep the residual orthogonal to
the recycled test space while still reducing its norm.  The auxiliary
vectors come for free from continuation columns of the source recursion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BREAKDOWN_RTOL, LinearOperator
from .report import SolveReport
from .solvers import BiLanczosData
from .sridr import _OmegaChooser, _norm1_probe

__all__ = ["ApostState", "apost_init", "apost_step"]


@dataclass
class ApostState:
    """State of the post-iteration scheme.

    ``P_apost`` holds the continuation left column first, then seeded
    random shadow vectors; auxiliary images and preimages start from the
    source run's continuation columns.  ``entry_defect`` records how
    orthogonal the incoming residual was to the source left space.
    """

    x: np.ndarray
    r: np.ndarray
    aux_pre: np.ndarray
    aux_img: np.ndarray
    P_apost: np.ndarray
    omega_policy: str = "omega_opt"
    omega: float = 1.0
    entry_defect: float = float("nan")       # |W^H r| / |r| at entry
    entry_defect_rhs: float = float("nan")   # |W^H r| / |b| at entry
    cycles_done: int = 0
    mv_spent: int = 0
    history: list = field(default_factory=list)
    stopped: Optional[str] = None

    @property
    def s(self) -> int:
        return self.P_apost.shape[1]


def apost_init(
    src: BiLanczosData,
    recycle_solution: SolveReport,
    s: int,
    seed: int = 0,
    b: Optional[np.ndarray] = None,
    A: Optional[LinearOperator] = None,
    omega_policy: str = "omega_opt",
) -> ApostState:
    """Prepare post-iterations from a source run and a recycling solution.

    The first shadow vector is the source's continuation left column; the
    auxiliary pairs are the continuation image/preimage columns, so the
    run must have been extended by ``s - 1`` steps for ``s > 1``.  The
    remaining shadow vectors are seeded standard normal.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    have_ext = 1 + src.ext_V.shape[1]
    if s > have_ext:
        raise ValueError(
            f"source not extended far enough: need {s - 1} extension columns, "
            f"have {src.ext_V.shape[1]}"
        )
    n_rows = len(src.w_next)
    imgs = [src.v_next] + [src.ext_V[:, j] for j in range(s - 1)]
    pres = [src.u_next] + [src.ext_U[:, j] for j in range(s - 1)]
    aux_img = np.column_stack(imgs)
    aux_pre = np.column_stack(pres)
    shadows = [src.w_next.astype(float, copy=True)]
    rng = np.random.default_rng(seed)
    for _ in range(s - 1):
        p = rng.standard_normal(n_rows)
        shadows.append(p / np.linalg.norm(p))
    p_apost = np.column_stack(shadows)

    x = np.array(recycle_solution.x)
    if b is not None and A is not None:
        r = b - A.apply_uncounted(x)
    else:
        raise ValueError("apost_init needs the right-hand side and operator")
    wr = np.linalg.norm(src.W.conj().T @ r)
    entry = float(wr / max(np.linalg.norm(r), 1e-300))
    entry_rhs = float(wr / max(np.linalg.norm(b), 1e-300))
    state = ApostState(
        x=x,
        r=r,
        aux_pre=aux_pre,
        aux_img=aux_img,
        P_apost=p_apost,
        omega_policy=omega_policy,
        entry_defect=entry,
        entry_defect_rhs=entry_rhs,
    )
    state.history.append((0, float(np.linalg.norm(r))))
    return state


def apost_step(
    state: ApostState,
    A: LinearOperator,
    count: int = 1,
    forced_omegas=None,
    omega_bounds=None,
    kappa: float = 0.7,
) -> ApostState:
    """Run ``count`` post-iteration cycles, returning a new state.

    Each cycle projects the residual obliquely onto the shadow complement
    using the held auxiliary pairs, relaxes it, and then rebuilds every
    auxiliary pair at the new level with the same relaxation: ``s + 1``
    operator products per cycle (two for the single-shadow scheme).  The
    solution is maintained through the preimages throughout.
    """
    chooser = _OmegaChooser(
        state.omega_policy,
        forced=forced_omegas,
        bounds=omega_bounds,
        fallback=lambda: 1.0 / _norm1_probe(A),
        kappa=kappa,
    )
    x = state.x.copy()
    r = state.r.copy()
    U = state.aux_pre.copy()
    G = state.aux_img.copy()
    P = state.P_apost
    s = state.s
    omega = state.omega
    mv0 = A.counter.count
    history = list(state.history)
    stopped = None

    for _ in range(count):
        M = P.conj().T @ G
        f = P.conj().T @ r
        try:
            gamma = np.linalg.solve(M, f)
        except np.linalg.LinAlgError:
            stopped = "shadow projection broke down"
            break
        scale = np.linalg.norm(P[:, 0]) * np.linalg.norm(G[:, 0])
        if abs(M[0, 0]) <= BREAKDOWN_RTOL * max(scale, 1e-300):
            stopped = "shadow projection broke down"
            break
        # residual block: project, then relax
        x = x + U @ gamma
        q = r - G @ gamma
        t = A.apply(q)
        omega = chooser(t, q)
        x = x + omega * q
        r = q - omega * t
        # auxiliary rebuild at the new level with the same relaxation
        for i in range(s):
            f_i = P.conj().T @ r
            gamma_i = np.linalg.solve(M, f_i)
            q_i = r - G @ gamma_i
            u_new = U @ gamma_i + omega * q_i
            g_new = A.apply(u_new)
            U[:, i] = u_new
            G[:, i] = g_new
            M[:, i] = P.conj().T @ g_new
        history.append(
            (A.counter.count - mv0 + state.mv_spent, float(np.linalg.norm(r)))
        )

    out = ApostState(
        x=x,
        r=r,
        aux_pre=U,
        aux_img=G,
        P_apost=P,
        omega_policy=state.omega_policy,
        omega=omega,
        entry_defect=state.entry_defect,
        entry_defect_rhs=state.entry_defect_rhs,
        cycles_done=state.cycles_done + (len(history) - len(state.history)),
        mv_spent=state.mv_spent + A.counter.count - mv0,
        history=history,
        stopped=stopped,
    )
    return out
