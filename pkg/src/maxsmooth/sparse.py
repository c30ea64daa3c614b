"""Sparse symmetric matrices and banded Cholesky factorization.

The factorization pipeline is: reverse-Cuthill-McKee fill-reducing ordering,
band extraction of the permuted matrix, then an in-repo banded Cholesky
kernel (numba or numpy engine, see ``_kernels``). The permutation is an
internal detail of :class:`CholFactor`; solves and samples are returned in the
caller's original ordering.

``chol`` never regularizes: a non-positive pivot raises
:class:`NotPositiveDefiniteError`. Callers that want jitter must opt in via
``chol_jitter``, which records the jitter it used on the returned factor.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels
from .errors import DimensionMismatchError, NotPositiveDefiniteError


class SparseSymMatrix:
    """Symmetric sparse matrix stored as upper-triangle triplets.

    Entries are canonical: ``row <= col``, sorted by (row, col), duplicates
    summed. Only the upper triangle is stored; the full symmetric matrix is
    materialized on demand.
    """

    __slots__ = ("dim", "rows", "cols", "vals")

    def __init__(self, dim, rows, cols, vals, _canonical=False):
        self.dim = int(dim)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise DimensionMismatchError("triplet arrays must share a shape")
        if not _canonical:
            if rows.size and (rows.min() < 0 or cols.max() >= self.dim):
                raise DimensionMismatchError("triplet index out of range")
            if np.any(rows > cols):
                raise DimensionMismatchError(
                    "entries must satisfy row <= col (upper triangle)"
                )
            # Sort and merge duplicates.
            order = np.lexsort((cols, rows))
            rows, cols, vals = rows[order], cols[order], vals[order]
            if rows.size:
                key = rows * self.dim + cols
                uniq, inv = np.unique(key, return_inverse=True)
                merged = np.zeros(uniq.size, dtype=np.float64)
                np.add.at(merged, inv, vals)
                rows = (uniq // self.dim).astype(np.int64)
                cols = (uniq % self.dim).astype(np.int64)
                vals = merged
                keep = vals != 0.0
                if not keep.all():
                    rows, cols, vals = rows[keep], cols[keep], vals[keep]
        self.rows, self.cols, self.vals = rows, cols, vals

    @classmethod
    def identity(cls, n, scale=1.0):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, idx, idx, np.full(n, float(scale)), _canonical=True)

    @classmethod
    def from_diag(cls, d):
        d = np.asarray(d, dtype=np.float64)
        idx = np.arange(d.size, dtype=np.int64)
        keep = d != 0.0
        return cls(d.size, idx[keep], idx[keep], d[keep], _canonical=True)

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatchError("dense input must be square")
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise DimensionMismatchError("dense input must be symmetric")
        r, c = np.nonzero(np.triu(a))
        return cls(a.shape[0], r, c, a[r, c])

    @classmethod
    def from_scipy(cls, a):
        """Build from any scipy sparse matrix assumed numerically symmetric."""
        coo = sp.triu(a, k=0).tocoo()
        return cls(a.shape[0], coo.row, coo.col, coo.data)

    @property
    def nnz(self):
        return self.vals.size

    def to_dense(self):
        a = np.zeros((self.dim, self.dim))
        a[self.rows, self.cols] = self.vals
        off = self.rows != self.cols
        a[self.cols[off], self.rows[off]] = self.vals[off]
        return a

    def to_scipy_full(self):
        """Full symmetric CSR matrix."""
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return sp.csr_matrix((v, (r, c)), shape=(self.dim, self.dim))

    def diag(self):
        d = np.zeros(self.dim)
        on = self.rows == self.cols
        d[self.rows[on]] = self.vals[on]
        return d

    def scale(self, c):
        return SparseSymMatrix(
            self.dim, self.rows, self.cols, self.vals * float(c), _canonical=True
        )

    def add(self, other):
        if isinstance(other, SparseSymMatrix):
            if other.dim != self.dim:
                raise DimensionMismatchError("dimension mismatch in add")
            return SparseSymMatrix(
                self.dim,
                np.concatenate([self.rows, other.rows]),
                np.concatenate([self.cols, other.cols]),
                np.concatenate([self.vals, other.vals]),
            )
        raise TypeError("add expects a SparseSymMatrix")

    def add_diag(self, d):
        if np.isscalar(d):
            d = np.full(self.dim, float(d))
        return self.add(SparseSymMatrix.from_diag(d))

    def matvec(self, x):
        return self.to_scipy_full() @ np.asarray(x, dtype=np.float64)

    def quad_form(self, x):
        """x^T A x."""
        x = np.asarray(x, dtype=np.float64)
        return float(x @ (self.to_scipy_full() @ x))

    def __repr__(self):
        return f"SparseSymMatrix(dim={self.dim}, nnz={self.nnz})"


def kron(a, b):
    """Kronecker product of two symmetric sparse matrices."""
    full = sp.kron(a.to_scipy_full(), b.to_scipy_full(), format="csr")
    return SparseSymMatrix.from_scipy(full)


def bdiag(blocks):
    """Block-diagonal assembly of symmetric sparse matrices."""
    blocks = list(blocks)
    if not blocks:
        raise DimensionMismatchError("bdiag needs at least one block")
    rows, cols, vals = [], [], []
    off = 0
    for blk in blocks:
        rows.append(blk.rows + off)
        cols.append(blk.cols + off)
        vals.append(blk.vals)
        off += blk.dim
    return SparseSymMatrix(
        off,
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
        _canonical=True,
    )


@dataclass
class CholFactor:
    """Banded Cholesky factor of P A P^T with its permutation.

    ``band[j, d]`` holds L[p_j + d, p_j] in the permuted ordering. ``jitter``
    is the diagonal regularization that was added before factorizing (0.0 for
    plain ``chol``).
    """

    dim: int
    perm: np.ndarray
    band: np.ndarray
    jitter: float = 0.0
    _pattern_bw: int = field(default=0, repr=False)

    def solve(self, b):
        return solve(self, b)

    def logdet(self):
        return logdet(self)

    def sample_canonical(self, b, rng):
        return sample_canonical(self, b, rng)


def _band_of(a, perm):
    """Extract banded storage of the permuted matrix."""
    full = a.to_scipy_full()
    ap = full[perm, :][:, perm].tocoo()
    low = ap.row >= ap.col
    r, c, v = ap.row[low], ap.col[low], ap.data[low]
    bw = int((r - c).max()) if r.size else 0
    band = np.zeros((a.dim, bw + 1))
    band[c, r - c] = v
    return band


def chol(a):
    """Sparse Cholesky factorization; raises on any non-positive pivot.

    Never regularizes. Use ``chol_jitter`` for the escalating-jitter variant.
    """
    full = a.to_scipy_full()
    perm = np.asarray(reverse_cuthill_mckee(full, symmetric_mode=True), dtype=np.int64)
    band = _band_of(a, perm)
    fail = _kernels.band_chol(band)
    if fail:
        raise NotPositiveDefiniteError(fail - 1)
    return CholFactor(a.dim, perm, band, 0.0, band.shape[1] - 1)


def chol_jitter(a, max_jitter=1e-6):
    """Cholesky with escalating diagonal jitter 1e-10, 1e-9, ..., ``max_jitter``.

    The jitter actually used is recorded on the returned factor. Raises the
    final NotPositiveDefiniteError if even ``max_jitter`` fails.
    """
    try:
        return chol(a)
    except NotPositiveDefiniteError:
        pass
    delta = 1e-10
    while delta <= max_jitter * (1 + 1e-12):
        try:
            f = chol(a.add_diag(delta))
            f.jitter = delta
            return f
        except NotPositiveDefiniteError as err:
            last = err
        delta *= 10.0
    raise last


def solve(f, b):
    """Solve A x = b given the factor of A. Accepts (n,) or (n, k)."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dim:
        raise DimensionMismatchError("right-hand side has wrong length")
    single = b.ndim == 1
    bmat = b[:, None] if single else b
    out = np.empty_like(bmat)
    for k in range(bmat.shape[1]):
        y = bmat[f.perm, k].copy()
        _kernels.band_fwd(f.band, y)
        _kernels.band_bwd(f.band, y)
        x = np.empty(f.dim)
        x[f.perm] = y
        out[:, k] = x
    return out[:, 0] if single else out


def logdet(f):
    """log det A from its Cholesky factor."""
    return 2.0 * float(np.sum(np.log(f.band[:, 0])))


def sample_canonical(f, b, rng):
    """One draw from N(A^{-1} b, A^{-1}) given the factor of A.

    Consumes exactly one standard-normal vector of length dim from ``rng``.
    """
    z = rng.standard_normal(f.dim)
    mean = solve(f, b)
    _kernels.band_bwd(f.band, z)
    noise = np.empty(f.dim)
    noise[f.perm] = z
    return mean + noise
