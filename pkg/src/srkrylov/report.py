"""Solve reports: solution, true-residual history and cost counters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = ["SolveReport", "Recorder"]


@dataclass
class SolveReport:
    """Outcome of one solve.

    ``history`` holds ``(mv_count, true_resnorm)`` pairs with strictly
    increasing counts; every residual norm in it was recomputed from the
    current iterate as ``|b - A x|``, never taken from a recursively
    updated residual.  ``rd_total`` is the dimension of the test space the
    final residual was orthogonalized against.
    """

    x: np.ndarray
    history: list[tuple[int, float]]
    converged: bool
    mv_total: int
    rd_total: int
    method: str = ""
    defects: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    markers: dict[int, str] = field(default_factory=dict)

    @property
    def final_resnorm(self) -> float:
        return self.history[-1][1] if self.history else float("nan")

    def mvs_to_tol(self, tol_abs: float) -> Optional[int]:
        """First recorded mv count with residual at or below ``tol_abs``."""
        for mv, res in self.history:
            if res <= tol_abs:
                return mv
        return None


class Recorder:
    """Collects history rows for a solve in progress.

    ``record`` recomputes the true residual through an uncounted operator
    application, so instrumentation never perturbs cost accounting.
    """

    def __init__(self, op, b: np.ndarray, every_mv: bool = True):
        self.op = op
        self.b = b
        self.every_mv = every_mv
        self.rows: list[tuple[int, float]] = []
        self.markers: dict[int, str] = {}
        self._mv0 = op.counter.count

    @property
    def mv(self) -> int:
        return self.op.counter.count - self._mv0

    def true_resnorm(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.b - self.op.apply_uncounted(x)))

    def record(self, x: np.ndarray, marker: str | None = None, force: bool = False) -> float:
        mv = self.mv
        if self.rows and self.rows[-1][0] == mv:
            if not force:
                res = self.rows[-1][1]
            else:
                # same count: replace the stale row, keep counts strictly increasing
                res = self.true_resnorm(x)
                self.rows[-1] = (mv, res)
        else:
            res = self.true_resnorm(x)
            self.rows.append((mv, res))
        if marker:
            self.markers[mv] = marker
        return res
