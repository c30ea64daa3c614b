"""Random-walk and lattice Gaussian Markov random field structure matrices.

Index convention for n1 x n2 lattices: site (i1, i2) maps to the flat index
``i1 + n1 * i2`` with 0-based (i1, i2), i.e. i1 varies fastest. All lattice
operations in the package use this convention.

Two boundary treatments exist for the second-difference structure matrix:
the free-boundary variant (corner diagonal entries 1, singular with the
constant null vector) used as intrinsic prior structure, and the
zero-boundary variant (all diagonal entries 2, full rank) which conditions
the field to vanish outside the domain.
"""

import functools

import numpy as np

from . import sparse
from .errors import DimensionMismatchError
from .sparse import SparseSymMatrix

LOG_2PI = float(np.log(2.0 * np.pi))


def rw_structure(m):
    """First-order random-walk structure matrix, free boundary (rank m - 1)."""
    if m < 2:
        raise DimensionMismatchError("free-boundary structure needs m >= 2")
    d = np.full(m, 2.0)
    d[0] = 1.0
    d[-1] = 1.0
    rows = np.concatenate([np.arange(m), np.arange(m - 1)])
    cols = np.concatenate([np.arange(m), np.arange(1, m)])
    vals = np.concatenate([d, np.full(m - 1, -1.0)])
    return SparseSymMatrix(m, rows, cols, vals)


def rw_structure_zero_boundary(m):
    """Second-difference structure with zero boundary (full rank)."""
    if m < 1:
        raise DimensionMismatchError("zero-boundary structure needs m >= 1")
    rows = np.concatenate([np.arange(m), np.arange(m - 1)])
    cols = np.concatenate([np.arange(m), np.arange(1, m)])
    vals = np.concatenate([np.full(m, 2.0), np.full(m - 1, -1.0)])
    return SparseSymMatrix(m, rows, cols, vals)


@functools.lru_cache(maxsize=32)
def lattice_structure(n1, n2, variant="free"):
    """2-D lattice structure matrix R_{n1} (x) I + I (x) R_{n2}.

    ``variant`` selects the boundary treatment of both 1-D factors:
    "free" (intrinsic, rank n1*n2 - 1) or "zero" (full rank).
    """
    if variant == "free":
        r1, r2 = rw_structure(n1), rw_structure(n2)
    elif variant == "zero":
        r1, r2 = rw_structure_zero_boundary(n1), rw_structure_zero_boundary(n2)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    eye1 = SparseSymMatrix.identity(n1)
    eye2 = SparseSymMatrix.identity(n2)
    # i1 fast: the n1-direction factor sits rightmost in the Kronecker product.
    return sparse.kron(eye2, r1).add(sparse.kron(r2, eye1))


def igmrf_eigenvalues(n1, n2):
    """Eigenvalues of the free-boundary lattice structure, index i1 + n1*i2."""
    i1 = np.arange(n1)
    i2 = np.arange(n2)
    lam1 = 2.0 * (1.0 - np.cos(np.pi * i1 / n1))
    lam2 = 2.0 * (1.0 - np.cos(np.pi * i2 / n2))
    return (lam1[None, :] + lam2[:, None]).ravel()


@functools.lru_cache(maxsize=32)
def _igmrf_logdet_sum(n1, n2):
    lam = igmrf_eigenvalues(n1, n2)
    # The single zero eigenvalue (constant direction) is excluded.
    lam = np.sort(lam)[1:]
    return float(np.sum(np.log(lam)))


def igmrf_logdensity(u, n1, n2, sigma_u):
    """Eigenvalue-corrected log-density of the first-order intrinsic field.

    This is the proper density on the rank-(N-1) support, evaluated at u in
    the full coordinate system; it is invariant to adding a constant to u.
    """
    u = np.asarray(u, dtype=np.float64)
    n = n1 * n2
    if u.size != n:
        raise DimensionMismatchError("field length does not match lattice dims")
    q = lattice_structure(n1, n2, "free")
    quad = q.quad_form(u)
    s2 = float(sigma_u) ** 2
    return (
        -0.5 * (n - 1) * LOG_2PI
        - 0.5 * (n - 1) * np.log(s2)
        + 0.5 * _igmrf_logdet_sum(n1, n2)
        - 0.5 * quad / s2
    )


def rw1_precision(m, sigma_u):
    """Intrinsic first-order random-walk precision, sigma_u^{-2} R_m."""
    return rw_structure(m).scale(1.0 / float(sigma_u) ** 2)


def rw1_eigenvalues(m):
    """Eigenvalues 2(1 - cos(pi k / m)), k = 0..m-1, of the free-boundary R_m."""
    k = np.arange(m)
    return 2.0 * (1.0 - np.cos(np.pi * k / m))


@functools.lru_cache(maxsize=64)
def _rw1_logdet_sum(m):
    lam = rw1_eigenvalues(m)[1:]
    return float(np.sum(np.log(lam)))


def rw1_logdensity(u, sigma_u):
    """Eigenvalue-corrected log-density of a 1-D intrinsic random walk."""
    u = np.asarray(u, dtype=np.float64)
    m = u.size
    q = rw_structure(m)
    s2 = float(sigma_u) ** 2
    return (
        -0.5 * (m - 1) * LOG_2PI
        - 0.5 * (m - 1) * np.log(s2)
        + 0.5 * _rw1_logdet_sum(m)
        - 0.5 * q.quad_form(u) / s2
    )


def _dct_basis(m):
    """Orthonormal eigenvectors of the free-boundary R_m (columns)."""
    j = np.arange(m)[:, None]
    k = np.arange(m)[None, :]
    v = np.cos(np.pi * k * (j + 0.5) / m)
    v[:, 0] /= np.sqrt(m)
    v[:, 1:] *= np.sqrt(2.0 / m)
    return v


def igmrf_sample(n1, n2, sigma_u, rng):
    """Draw an intrinsic lattice field by eigen-construction.

    The zero eigendirection (constant) is set to 0, so draws sum to zero.
    Consumes one standard-normal array of shape (n1, n2) from ``rng``.
    Returns the field in flat index order (i1 fast).
    """
    z = rng.standard_normal((n1, n2))
    lam1 = rw1_eigenvalues(n1)
    lam2 = rw1_eigenvalues(n2)
    lam = lam1[:, None] + lam2[None, :]
    coef = np.zeros((n1, n2))
    mask = lam > 0
    coef[mask] = float(sigma_u) * z[mask] / np.sqrt(lam[mask])
    field = _dct_basis(n1) @ coef @ _dct_basis(n2).T
    # field[i1, i2]; flatten with i1 fast.
    return field.ravel(order="F")
