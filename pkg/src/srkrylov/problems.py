"""Test-matrix generators, right-hand-side sequences and Matrix Market I/O."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .core import BreakdownError, CsrMatrix, reduced_qr

__all__ = [
    "ProblemInstance",
    "read_matrix_market",
    "write_matrix_market",
    "gen_poisson2d",
    "gen_tridiag",
    "gen_cdr3d",
    "gen_rhs_sequence",
    "cond1_estimate",
    "make_direct_solver",
]


@dataclass
class ProblemInstance:
    """A matrix with its right-hand-side set and bookkeeping labels."""

    A: CsrMatrix
    rhs_set: np.ndarray
    label: str
    cond_estimate: Optional[float] = None


class MatrixMarketError(ValueError):
    """Malformed Matrix Market content."""


def read_matrix_market(path) -> CsrMatrix:
    """Read a Matrix Market file into CSR form.

    Supports coordinate and array formats, real/integer/complex fields and
    general/symmetric/skew-symmetric/hermitian symmetry.  Symmetric storage
    is expanded to both triangles; duplicate coordinate entries are summed.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.strip().split()
        if (
            len(parts) < 5
            or parts[0] != "%%MatrixMarket"
            or parts[1].lower() != "matrix"
        ):
            raise MatrixMarketError(f"malformed header: {header.strip()!r}")
        fmt, field_, symm = (p.lower() for p in parts[2:5])
        if fmt not in ("coordinate", "array"):
            raise MatrixMarketError(f"unsupported format {fmt!r}")
        if field_ not in ("real", "integer", "complex", "pattern"):
            raise MatrixMarketError(f"unsupported field {field_!r}")
        if symm not in ("general", "symmetric", "skew-symmetric", "hermitian"):
            raise MatrixMarketError(f"unsupported symmetry {symm!r}")

        line = fh.readline()
        while line and line.lstrip().startswith("%"):
            line = fh.readline()
        if not line:
            raise MatrixMarketError("missing size line")
        sizes = line.split()

        complex_ = field_ == "complex"
        if fmt == "coordinate":
            if len(sizes) != 3:
                raise MatrixMarketError("coordinate size line needs 3 integers")
            nrows, ncols, nnz = (int(s) for s in sizes)
            rows = np.empty(nnz, dtype=np.int64)
            cols = np.empty(nnz, dtype=np.int64)
            vals = np.empty(nnz, dtype=complex if complex_ else float)
            k = 0
            for line in fh:
                if not line.strip() or line.lstrip().startswith("%"):
                    continue
                if k >= nnz:
                    raise MatrixMarketError("more entries than declared")
                toks = line.split()
                rows[k] = int(toks[0]) - 1
                cols[k] = int(toks[1]) - 1
                if field_ == "pattern":
                    vals[k] = 1.0
                elif complex_:
                    vals[k] = float(toks[2]) + 1j * float(toks[3])
                else:
                    vals[k] = float(toks[2])
                k += 1
            if k != nnz:
                raise MatrixMarketError(f"declared {nnz} entries, found {k}")
        else:
            if len(sizes) != 2:
                raise MatrixMarketError("array size line needs 2 integers")
            nrows, ncols = (int(s) for s in sizes)
            dense = np.zeros((nrows, ncols), dtype=complex if complex_ else float)
            count = 0
            # column-major, lower triangle only for non-general symmetry
            coords = [
                (i, j)
                for j in range(ncols)
                for i in range(j if symm != "general" else 0, nrows)
            ]
            for line in fh:
                if not line.strip() or line.lstrip().startswith("%"):
                    continue
                if count >= len(coords):
                    raise MatrixMarketError("more entries than declared")
                toks = line.split()
                v = (
                    float(toks[0]) + 1j * float(toks[1])
                    if complex_
                    else float(toks[0])
                )
                dense[coords[count]] = v
                count += 1
            if count != len(coords):
                raise MatrixMarketError(
                    f"declared {len(coords)} array entries, found {count}"
                )
            rows, cols = np.nonzero(dense)
            vals = dense[rows, cols]

    if symm != "general":
        off = rows != cols
        r2, c2, v2 = cols[off], rows[off], vals[off]
        if symm == "skew-symmetric":
            v2 = -v2
        elif symm == "hermitian":
            v2 = np.conj(v2)
        rows = np.concatenate([rows, r2])
        cols = np.concatenate([cols, c2])
        vals = np.concatenate([vals, v2])

    if np.iscomplexobj(vals) and np.all(vals.imag == 0):
        vals = vals.real
    return CsrMatrix.from_coo(nrows, ncols, rows, cols, vals)


def write_matrix_market(path, a: CsrMatrix, comment: str = "") -> None:
    """Write CSR content as a general coordinate Matrix Market file."""
    complex_ = np.iscomplexobj(a.values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"%%MatrixMarket matrix coordinate "
            f"{'complex' if complex_ else 'real'} general\n"
        )
        if comment:
            fh.write(f"% {comment}\n")
        fh.write(f"{a.nrows} {a.ncols} {a.nnz}\n")
        for i in range(a.nrows):
            for p in range(a.row_ptr[i], a.row_ptr[i + 1]):
                v = a.values[p]
                if complex_:
                    fh.write(f"{i + 1} {a.col_idx[p] + 1} {v.real:.17g} {v.imag:.17g}\n")
                else:
                    fh.write(f"{i + 1} {a.col_idx[p] + 1} {v:.17g}\n")


def gen_tridiag(sub: float, diag: float, sup: float, n: int) -> CsrMatrix:
    """Constant-band tridiagonal matrix of order ``n``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rows, cols, vals = [], [], []
    for i in range(n):
        if i > 0 and sub != 0.0:
            rows.append(i)
            cols.append(i - 1)
            vals.append(sub)
        rows.append(i)
        cols.append(i)
        vals.append(diag)
        if i < n - 1 and sup != 0.0:
            rows.append(i)
            cols.append(i + 1)
            vals.append(sup)
    return CsrMatrix.from_coo(n, n, rows, cols, vals)


def gen_poisson2d(m: int) -> CsrMatrix:
    """Two-dimensional 5-point Laplacian on an ``m x m`` interior grid.

    Dirichlet boundary eliminated; diagonal 4, grid-neighbor entries -1;
    equals the Kronecker sum of 1-D second-difference matrices.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    idx = lambda ix, iy: iy * m + ix
    rows, cols, vals = [], [], []
    for iy in range(m):
        for ix in range(m):
            i = idx(ix, iy)
            rows.append(i)
            cols.append(i)
            vals.append(4.0)
            for jx, jy in ((ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1)):
                if 0 <= jx < m and 0 <= jy < m:
                    rows.append(i)
                    cols.append(idx(jx, jy))
                    vals.append(-1.0)
    return CsrMatrix.from_coo(m * m, m * m, rows, cols, vals)


def gen_cdr3d(
    h: float,
    peclet: tuple[float, float, float] = (1.0, 1.0, 1.0),
    reaction: float = -1.0,
) -> CsrMatrix:
    """Convection-diffusion-reaction operator on the unit cube.

    Central differences for both second- and first-order terms, constant
    velocity per axis, reaction as a diagonal shift, Dirichlet boundary
    eliminated.  ``1/h`` must be an integer >= 2; the interior grid then has
    ``(1/h - 1)**3`` points.
    """
    inv_h = 1.0 / h
    m_f = round(inv_h)
    if abs(inv_h - m_f) > 1e-9 or m_f < 2:
        raise ValueError("1/h must be an integer >= 2")
    m = int(m_f) - 1
    n = m**3
    h2 = h * h
    diag = 6.0 / h2 + reaction
    idx = lambda ix, iy, iz: (iz * m + iy) * m + ix
    rows, cols, vals = [], [], []
    offsets = (
        (1, 0, 0, peclet[0]),
        (0, 1, 0, peclet[1]),
        (0, 0, 1, peclet[2]),
    )
    for iz in range(m):
        for iy in range(m):
            for ix in range(m):
                i = idx(ix, iy, iz)
                rows.append(i)
                cols.append(i)
                vals.append(diag)
                for dx, dy, dz, pe in offsets:
                    for sgn in (-1, 1):
                        jx, jy, jz = ix + sgn * dx, iy + sgn * dy, iz + sgn * dz
                        if 0 <= jx < m and 0 <= jy < m and 0 <= jz < m:
                            rows.append(i)
                            cols.append(idx(jx, jy, jz))
                            vals.append(-1.0 / h2 + sgn * pe / (2.0 * h))
    return CsrMatrix.from_coo(n, n, rows, cols, vals)


def make_direct_solver(a: CsrMatrix) -> Callable[[np.ndarray], np.ndarray]:
    """Factorize once, return a dense-vector solve callback."""
    lu = scipy.sparse.linalg.splu(a.to_scipy().tocsc())
    return lu.solve


def gen_rhs_sequence(
    a: CsrMatrix,
    b: np.ndarray,
    z: int,
    solve: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    direct_limit: int = 20000,
) -> np.ndarray:
    """Orthonormal right-hand-side block spanning a reverse Krylov space.

    Starting from ``b``, each new column is an accurate solve of the
    previous one, and the whole block is re-orthonormalized by reduced QR
    after every extension.  The returned ``N x (z+1)`` block has
    orthonormal columns, the first parallel to ``b``.

    An explicit ``solve`` callback overrides the default inner solver
    (sparse direct factorization up to ``direct_limit`` unknowns, BiCGSTAB
    to 1e-12 beyond that).
    """
    b = np.asarray(b, dtype=float if not np.iscomplexobj(b) else complex)
    if solve is None:
        if a.nrows <= direct_limit:
            solve = make_direct_solver(a)
        else:
            m = a.to_scipy()

            def solve(v, _m=m):
                x, info = scipy.sparse.linalg.bicgstab(_m, v, rtol=1e-12, atol=0.0)
                if info != 0:
                    raise BreakdownError(f"inner solve failed with info={info}")
                return x

    last = b
    block = b.reshape(-1, 1)
    for _ in range(z):
        last = solve(last)
        block = np.column_stack([block, last])
        block, _ = reduced_qr(block)
        last = block[:, -1]
    return block


def cond1_estimate(a: CsrMatrix) -> float:
    """1-norm condition estimate: exact ``|A|_1`` times estimated ``|A^-1|_1``."""
    solve = make_direct_solver(a)
    solve_t = make_direct_solver(a.transpose())
    inv_op = scipy.sparse.linalg.LinearOperator(
        shape=(a.nrows, a.ncols),
        matvec=solve,
        rmatvec=solve_t,
        dtype=a.values.dtype,
    )
    inv_norm1 = scipy.sparse.linalg.onenormest(inv_op)
    return a.norm1() * float(inv_norm1)
