import numpy as np
import pytest

from srkrylov.core import CsrMatrix


def random_sparse(n, density=0.3, seed=0, shift=0.0, complex_=False):
    """Random square CSR test matrix with a diagonal shift for solvability."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    if complex_:
        a = a + 1j * rng.standard_normal((n, n))
    mask = rng.random((n, n)) < density
    np.fill_diagonal(mask, True)
    a = np.where(mask, a, 0.0)
    a = a + shift * np.eye(n)
    return CsrMatrix.from_dense(a)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
