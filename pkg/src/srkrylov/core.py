"""Dense vectors, CSR matrices, abstract operators and small factorizations.

Everything in here is deliberately boring: the solver modules build on these
few primitives and nothing else.  Scalars are real ``float64`` by default;
complex data is accepted everywhere and propagates through the same code
paths (``DTYPE`` below only fixes the default for constructors).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse

__all__ = [
    "BreakdownError",
    "DimensionMismatch",
    "MvCounter",
    "LinearOperator",
    "CsrMatrix",
    "PermutationMap",
    "BandedMatrix",
    "spmv",
    "reduced_qr",
    "hessenberg_lstsq",
    "operator_from_csr",
    "adjoint_operator",
    "BREAKDOWN_RTOL",
]

DTYPE = np.float64

# A pivot/normalizer counts as zero when it falls below this times the
# running norm scale of the quantity it was derived from.
BREAKDOWN_RTOL = 1e-14


class DimensionMismatch(ValueError):
    """Operand shapes are inconsistent."""


class BreakdownError(RuntimeError):
    """A normalizer or pivot fell below the breakdown tolerance.

    Carries ``step`` (where available) so callers can report how far a
    recursion got before dying.
    """

    def __init__(self, msg: str, step: Optional[int] = None):
        super().__init__(msg)
        self.step = step


class MvCounter:
    """Shared mutable counter of operator applications.

    Solvers hand one counter to every operator view of the same matrix, so
    recorded costs stay comparable across wrapped/projected variants.
    Incrementing is lock-protected: operators may be shared between solves
    running on different threads.
    """

    __slots__ = ("_lock", "count")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.count = 0

    def add(self, k: int = 1) -> None:
        with self._lock:
            self.count += k

    def __repr__(self) -> str:  # pragma: no cover
        return f"MvCounter({self.count})"


class LinearOperator:
    """A square operator known only through its action.

    Parameters
    ----------
    dim : int
        Dimension of the (square) operator.
    apply : callable
        ``x -> A @ x``.
    adjoint_apply : callable, optional
        ``x -> A^H @ x``.  Solvers needing the adjoint raise if absent.
    counter : MvCounter, optional
        Shared application counter; a fresh one is created when omitted.

    Every ``apply``/``adjoint_apply`` increments the counter exactly once.
    ``apply_uncounted`` exists for diagnostics (true-residual histories,
    precondition checks) that must not distort cost accounting.
    """

    def __init__(
        self,
        dim: int,
        apply: Callable[[np.ndarray], np.ndarray],
        adjoint_apply: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        counter: Optional[MvCounter] = None,
    ):
        self.dim = int(dim)
        self._apply = apply
        self._adjoint_apply = adjoint_apply
        self.counter = counter if counter is not None else MvCounter()

    @property
    def has_adjoint(self) -> bool:
        return self._adjoint_apply is not None

    def apply(self, x: np.ndarray) -> np.ndarray:
        if len(x) != self.dim:
            raise DimensionMismatch(f"operand length {len(x)} != dim {self.dim}")
        self.counter.add()
        return self._apply(x)

    def adjoint_apply(self, x: np.ndarray) -> np.ndarray:
        if self._adjoint_apply is None:
            raise DimensionMismatch("operator has no adjoint apply")
        if len(x) != self.dim:
            raise DimensionMismatch(f"operand length {len(x)} != dim {self.dim}")
        self.counter.add()
        return self._adjoint_apply(x)

    def apply_uncounted(self, x: np.ndarray) -> np.ndarray:
        """Diagnostic apply; never touches the counter."""
        return self._apply(x)

    def adjoint_apply_uncounted(self, x: np.ndarray) -> np.ndarray:
        if self._adjoint_apply is None:
            raise DimensionMismatch("operator has no adjoint apply")
        return self._adjoint_apply(x)


class AdjointView:
    """View of an operator with apply and adjoint swapped.

    Delegates to the wrapped operator's (already counted) methods, so no
    application is ever counted twice; the counter attribute is shared for
    cost inspection.
    """

    def __init__(self, op):
        if not op.has_adjoint:
            raise DimensionMismatch("cannot take adjoint view: no adjoint apply")
        self._op = op
        self.dim = op.dim
        self.counter = op.counter
        self.has_adjoint = True

    def apply(self, x):
        return self._op.adjoint_apply(x)

    def adjoint_apply(self, x):
        return self._op.apply(x)

    def apply_uncounted(self, x):
        return self._op.adjoint_apply_uncounted(x)

    def adjoint_apply_uncounted(self, x):
        return self._op.apply_uncounted(x)


def adjoint_operator(op) -> AdjointView:
    """Adjoint view of ``op``, sharing its counter."""
    return AdjointView(op)


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix.

    ``row_ptr`` is nondecreasing with ``len == nrows + 1``; column indices
    are strictly increasing within each row.  Instances are treated as
    immutable after construction.
    """

    nrows: int
    ncols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _scipy: Optional[scipy.sparse.csr_matrix] = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values)
        if self.row_ptr.shape != (self.nrows + 1,):
            raise ValueError("row_ptr must have length nrows + 1")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != len(self.col_idx):
            raise ValueError("row_ptr endpoints inconsistent with col_idx")
        if len(self.col_idx) != len(self.values):
            raise ValueError("col_idx and values must have equal length")
        if len(self.col_idx) and (
            self.col_idx.min() < 0 or self.col_idx.max() >= self.ncols
        ):
            raise ValueError("column index out of range")
        for i in range(self.nrows):
            lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
            if np.any(np.diff(self.col_idx[lo:hi]) <= 0):
                raise ValueError(f"column indices not strictly increasing in row {i}")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @classmethod
    def from_coo(
        cls, nrows: int, ncols: int, rows, cols, vals, sum_duplicates: bool = True
    ) -> "CsrMatrix":
        """Build from triplets; duplicate entries are summed."""
        m = scipy.sparse.coo_matrix(
            (np.asarray(vals), (np.asarray(rows), np.asarray(cols))),
            shape=(nrows, ncols),
        ).tocsr()
        if sum_duplicates:
            m.sum_duplicates()
        m.sort_indices()
        return cls(nrows, ncols, m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a: np.ndarray, tol: float = 0.0) -> "CsrMatrix":
        a = np.asarray(a)
        m = scipy.sparse.csr_matrix(a)
        m.sort_indices()
        if tol > 0.0:
            m.data[np.abs(m.data) <= tol] = 0.0
            m.eliminate_zeros()
        return cls(a.shape[0], a.shape[1], m.indptr, m.indices, m.data)

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        if self._scipy is None:
            self._scipy = scipy.sparse.csr_matrix(
                (self.values, self.col_idx, self.row_ptr),
                shape=(self.nrows, self.ncols),
            )
        return self._scipy

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "CsrMatrix":
        t = self.to_scipy().transpose().tocsr()
        t.sort_indices()
        return CsrMatrix(self.ncols, self.nrows, t.indptr, t.indices, t.data)

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def norm1(self) -> float:
        """Exact 1-norm (maximum absolute column sum)."""
        m = self.to_scipy()
        return float(np.max(np.abs(m).sum(axis=0))) if self.nnz else 0.0


def spmv(a: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product ``a @ x``.

    Pure function: counting belongs to :class:`LinearOperator`.
    """
    x = np.asarray(x)
    if x.shape[0] != a.ncols:
        raise DimensionMismatch(f"vector length {x.shape[0]} != ncols {a.ncols}")
    return a.to_scipy().dot(x)


def operator_from_csr(
    a: CsrMatrix, counter: Optional[MvCounter] = None
) -> LinearOperator:
    """Counting operator for a square CSR matrix, adjoint included."""
    if a.nrows != a.ncols:
        raise DimensionMismatch("operator_from_csr needs a square matrix")
    at = a.transpose()
    if np.iscomplexobj(a.values):
        adj = lambda x: np.conj(spmv(at, np.conj(x)))
    else:
        adj = lambda x: spmv(at, x)
    return LinearOperator(a.nrows, lambda x: spmv(a, x), adj, counter)


@dataclass
class PermutationMap:
    """Permutation of ``[0, n)`` stored as the image of each index.

    As a matrix, column ``a`` holds the unit vector ``e_forward[a]``.
    """

    forward: np.ndarray

    def __post_init__(self) -> None:
        self.forward = np.asarray(self.forward, dtype=np.intp)
        n = len(self.forward)
        seen = np.zeros(n, dtype=bool)
        seen[self.forward] = True
        if not seen.all():
            raise ValueError("forward is not a bijection on [0, n)")

    @property
    def n(self) -> int:
        return len(self.forward)

    @classmethod
    def identity(cls, n: int) -> "PermutationMap":
        return cls(np.arange(n, dtype=np.intp))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Matrix action ``P @ x``: index ``a`` is scattered to ``forward[a]``."""
        y = np.empty_like(np.asarray(x))
        y[self.forward] = x
        return y

    def apply_adjoint(self, x: np.ndarray) -> np.ndarray:
        """Action of ``P^H == P^{-1}``: gather."""
        return np.asarray(x)[self.forward]

    def permute_cols(self, m: np.ndarray) -> np.ndarray:
        """Right action ``M @ P``: column ``c`` of the result is ``M[:, forward[c]]``."""
        return np.asarray(m)[:, self.forward]

    def to_dense(self) -> np.ndarray:
        p = np.zeros((self.n, self.n))
        p[self.forward, np.arange(self.n)] = 1.0
        return p

    def transpose(self) -> "PermutationMap":
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(self.n, dtype=np.intp)
        return PermutationMap(inv)


class BandedMatrix:
    """Rectangular banded matrix in column-major band storage.

    Entry ``(i, j)`` with ``-lower <= i - j <= upper`` lives at
    ``data[upper + i - j, j]`` (LAPACK general-band layout, one column of
    ``data`` per matrix column).  Diagonal entries are stored explicitly
    even when zero.  Used for the band matrices of Lanczos/bi-Lanczos
    recursions and for the upper-triangular factors of short
    representations (``lower == 0``).
    """

    def __init__(self, nrows: int, ncols: int, lower: int, upper: int, data=None):
        self.nrows = int(nrows)
        self.ncols = int(ncols)
        self.lower = int(lower)
        self.upper = int(upper)
        if self.lower < 0 or self.upper < 0:
            raise ValueError("bandwidths must be nonnegative")
        shape = (self.lower + self.upper + 1, self.ncols)
        if data is None:
            self.data = np.zeros(shape, dtype=DTYPE)
        else:
            self.data = np.asarray(data)
            if self.data.shape != shape:
                raise ValueError(f"band data must have shape {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    def in_band(self, i: int, j: int) -> bool:
        return (
            -self.upper <= i - j <= self.lower
            and 0 <= i < self.nrows
            and 0 <= j < self.ncols
        )

    def get(self, i: int, j: int):
        if not (0 <= i < self.nrows and 0 <= j < self.ncols):
            raise IndexError((i, j))
        if not (-self.upper <= i - j <= self.lower):
            return self.data.dtype.type(0)
        return self.data[self.upper + i - j, j]

    def set(self, i: int, j: int, v) -> None:
        if not self.in_band(i, j):
            raise IndexError(f"({i}, {j}) outside stored band")
        self.data[self.upper + i - j, j] = v

    @classmethod
    def from_dense(cls, a: np.ndarray, lower: int, upper: int) -> "BandedMatrix":
        a = np.asarray(a)
        m = cls(a.shape[0], a.shape[1], lower, upper)
        m.data = m.data.astype(a.dtype)
        for j in range(a.shape[1]):
            i0 = max(0, j - upper)
            i1 = min(a.shape[0], j + lower + 1)
            for i in range(i0, i1):
                m.data[upper + i - j, j] = a[i, j]
        return m

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.nrows, self.ncols), dtype=self.data.dtype)
        for j in range(self.ncols):
            i0 = max(0, j - self.upper)
            i1 = min(self.nrows, j + self.lower + 1)
            a[i0:i1, j] = self.data[self.upper + i0 - j : self.upper + i1 - j, j]
        return a

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if len(x) != self.ncols:
            raise DimensionMismatch("matvec length mismatch")
        y = np.zeros(self.nrows, dtype=np.result_type(self.data, x))
        for d in range(-self.lower, self.upper + 1):
            # diagonal offset d holds entries (j - d, j)
            j0 = max(0, d)
            j1 = min(self.ncols, self.nrows + d)
            if j1 <= j0:
                continue
            rows = np.arange(j0, j1) - d
            y[rows] += self.data[self.upper - d, j0:j1] * x[j0:j1]
        return y

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        """Product with the conjugate transpose."""
        x = np.asarray(x)
        if len(x) != self.nrows:
            raise DimensionMismatch("rmatvec length mismatch")
        y = np.zeros(self.ncols, dtype=np.result_type(self.data, x))
        for d in range(-self.lower, self.upper + 1):
            j0 = max(0, d)
            j1 = min(self.ncols, self.nrows + d)
            if j1 <= j0:
                continue
            rows = np.arange(j0, j1) - d
            y[j0:j1] += np.conj(self.data[self.upper - d, j0:j1]) * x[rows]
        return y

    def solve_upper(self, y: np.ndarray) -> np.ndarray:
        """Back substitution for square upper-triangular banded systems."""
        if self.lower != 0 or self.nrows != self.ncols:
            raise ValueError("solve_upper needs a square upper-triangular band")
        n = self.ncols
        y = np.asarray(y)
        x = np.array(y, dtype=np.result_type(self.data, y))
        scale = float(np.max(np.abs(self.data))) or 1.0
        for j in range(n - 1, -1, -1):
            djj = self.data[self.upper, j]
            if abs(djj) <= BREAKDOWN_RTOL * scale:
                raise BreakdownError(f"zero diagonal in back substitution at {j}", j)
            x[j] = x[j] / djj
            i0 = max(0, j - self.upper)
            if i0 < j:
                x[i0:j] -= self.data[self.upper + i0 - j : self.upper, j] * x[j]
        return x

    def solve_upper_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Forward substitution with the conjugate transpose of the band."""
        if self.lower != 0 or self.nrows != self.ncols:
            raise ValueError("solve_upper_adjoint needs a square upper-triangular band")
        n = self.ncols
        y = np.asarray(y)
        x = np.array(y, dtype=np.result_type(self.data, y))
        scale = float(np.max(np.abs(self.data))) or 1.0
        for j in range(n):
            i0 = max(0, j - self.upper)
            if i0 < j:
                x[j] -= np.vdot(self.data[self.upper + i0 - j : self.upper, j], x[i0:j])
            djj = self.data[self.upper, j]
            if abs(djj) <= BREAKDOWN_RTOL * scale:
                raise BreakdownError(f"zero diagonal in forward substitution at {j}", j)
            x[j] = x[j] / np.conj(djj)
        return x

    def solve(self, y: np.ndarray) -> np.ndarray:
        """General banded solve (small systems; LAPACK gbsv underneath)."""
        if self.nrows != self.ncols:
            raise ValueError("solve needs a square matrix")
        return scipy.linalg.solve_banded((self.lower, self.upper), self.data, y)


def reduced_qr(b: np.ndarray, rank_rtol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR factorization by modified Gram-Schmidt.

    One full reorthogonalization pass keeps ``Q^H Q`` near identity even for
    moderately ill-conditioned input.  The diagonal of ``R`` is real and
    positive.  Raises :class:`BreakdownError` when a column drops below
    ``rank_rtol`` times its original norm after orthogonalization.
    """
    b = np.atleast_2d(np.asarray(b, dtype=np.result_type(b, DTYPE)))
    n, z = b.shape
    if n < z:
        raise DimensionMismatch("reduced_qr needs at least as many rows as columns")
    q = b.copy()
    r = np.zeros((z, z), dtype=q.dtype)
    for j in range(z):
        col_norm0 = np.linalg.norm(b[:, j])
        for _ in range(2):  # MGS + one reorthogonalization pass
            for i in range(j):
                h = np.vdot(q[:, i], q[:, j])
                r[i, j] += h
                q[:, j] -= h * q[:, i]
        nrm = np.linalg.norm(q[:, j])
        if nrm <= rank_rtol * max(col_norm0, 1e-300):
            raise BreakdownError(f"rank deficiency detected at column {j}", j)
        r[j, j] = nrm
        q[:, j] /= nrm
    return q, r


def hessenberg_lstsq(hbar, c: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares solve of an ``(n+1) x n`` Hessenberg system.

    Annihilates the subdiagonal with Givens rotations and back-substitutes,
    which is the numerically stable route for these long thin systems.

    Parameters
    ----------
    hbar : array or BandedMatrix
        Hessenberg matrix, one subdiagonal, ``(n+1) x n``.
    c : array
        Right-hand side of length ``n + 1``.

    Returns
    -------
    y : array
        Minimizer of ``|hbar y - c|``.
    resnorm : float
        Attained minimum of the 2-norm.
    """
    if isinstance(hbar, BandedMatrix):
        h = hbar.to_dense()
    else:
        h = np.asarray(hbar)
    n1, n = h.shape
    if n1 != n + 1:
        raise DimensionMismatch("expected (n+1) x n Hessenberg input")
    c = np.asarray(c)
    if len(c) != n + 1:
        raise DimensionMismatch("rhs length must be n + 1")
    r = h.astype(np.result_type(h, c, DTYPE)).copy()
    g = c.astype(r.dtype).copy()
    scale = float(np.max(np.abs(r))) or 1.0
    for j in range(n):
        a, b_ = r[j, j], r[j + 1, j]
        rad = np.hypot(abs(a), abs(b_))
        if rad <= BREAKDOWN_RTOL * scale:
            raise BreakdownError(f"singular leading structure at column {j}", j)
        cs = a / rad
        sn = b_ / rad
        hi = min(n, j + 1 + max(1, n))  # full row update; bands stay cheap anyway
        row_j = r[j, j:hi].copy()
        row_j1 = r[j + 1, j:hi].copy()
        r[j, j:hi] = np.conj(cs) * row_j + np.conj(sn) * row_j1
        r[j + 1, j:hi] = -sn * row_j + cs * row_j1
        gj, gj1 = g[j], g[j + 1]
        g[j] = np.conj(cs) * gj + np.conj(sn) * gj1
        g[j + 1] = -sn * gj + cs * gj1
    y = np.zeros(n, dtype=r.dtype)
    for j in range(n - 1, -1, -1):
        if abs(r[j, j]) <= BREAKDOWN_RTOL * scale:
            raise BreakdownError(f"singular triangular factor at column {j}", j)
        y[j] = (g[j] - r[j, j + 1 : n] @ y[j + 1 : n]) / r[j, j]
    return y, float(abs(g[n]))
