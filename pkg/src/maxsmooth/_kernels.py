"""Hot numerical kernels.

Each kernel is written once in numba-compatible numpy style and compiled with
``@njit`` unless the numpy engine is forced (see ``_engine``). The
pure-python/numpy interpretations are kept reachable in ``PY_IMPLS`` so the
engine benchmark can compare both paths on identical inputs.

Band storage convention: a symmetric banded matrix A with lower bandwidth
``bw`` is stored row-per-column as ``ab[j, d] = A[j + d, j]`` for
``d = 0..bw`` (entries beyond the matrix edge are zero). This keeps the
working slices contiguous.
"""

import numpy as np

from ._engine import NUMBA_ENABLED, njit


def _band_chol(ab):
    """In-place banded Cholesky, right-looking.

    Overwrites ``ab`` with the factor L in the same storage. Returns 0 on
    success, or ``j + 1`` if the pivot at column j is not strictly positive
    (including NaN).
    """
    n = ab.shape[0]
    bw = ab.shape[1] - 1
    for j in range(n):
        s = ab[j, 0]
        if not (s > 0.0):
            return j + 1
        d = np.sqrt(s)
        ab[j, 0] = d
        m = bw
        if n - 1 - j < m:
            m = n - 1 - j
        if m > 0:
            for t in range(1, m + 1):
                ab[j, t] /= d
            col = ab[j, 1 : m + 1]
            for b in range(1, m + 1):
                ab[j + b, 0 : m - b + 1] -= col[b - 1] * col[b - 1 : m]
    return 0


def _band_fwd(lb, x):
    """Solve L y = x in place given the banded factor."""
    n = lb.shape[0]
    bw = lb.shape[1] - 1
    for j in range(n):
        x[j] /= lb[j, 0]
        m = bw
        if n - 1 - j < m:
            m = n - 1 - j
        if m > 0:
            x[j + 1 : j + m + 1] -= lb[j, 1 : m + 1] * x[j]
    return x


def _band_bwd(lb, x):
    """Solve L^T z = x in place given the banded factor."""
    n = lb.shape[0]
    bw = lb.shape[1] - 1
    for j in range(n - 1, -1, -1):
        m = bw
        if n - 1 - j < m:
            m = n - 1 - j
        if m > 0:
            x[j] -= np.dot(lb[j, 1 : m + 1], x[j + 1 : j + m + 1])
        x[j] /= lb[j, 0]
    return x


LOG_2PI = 1.8378770664093453


def _logvar_loglik(x, y, mu, out):
    """Per-site data log-likelihood of the log-variance model.

    Evaluated the generic way an exact sampler evaluates it: each datum is
    standardized against the site's location and scale and scored with the
    Gaussian log-density, T evaluations per site. No reduction to sufficient
    statistics is applied; compressing the data to one summary per site is
    exactly the step that separates the two-step scheme from exact
    inference, so the exact reference must not take it. Term order matches
    the sweep kernel so cached values compare bit-for-bit.
    """
    nsites = x.shape[0]
    nrep = y.shape[1]
    for i in range(nsites):
        sd = np.exp(0.5 * x[i])
        s = 0.0
        for t in range(nrep):
            z = (y[i, t] - mu) / sd
            s += -0.5 * z * z - 0.5 * x[i] - 0.5 * LOG_2PI
        out[i] = s
    return out


def _logvar_sweeps(x, loglik, y, mu, tau, qdiag, qindptr, qindices, qdata,
                   zs, logus, gammas, b_rate, sds, track, n_prev,
                   mean, m2, draws, keep_idx, acc_sites, tau_out):
    """K Metropolis sweeps of single-site log-variance updates plus the
    conjugate tau update, batched so the hot loop stays in one call.

    The proposal's data log-likelihood is computed generically, T Gaussian
    log-density evaluations per site with per-datum standardization (see
    ``_logvar_loglik``); the current state's value is cached in ``loglik``
    and refreshed on acceptance, as any Metropolis implementation would.
    ``qdiag`` holds the prior structure diagonal, the CSR triple its
    off-diagonal entries; tau times the structure is the field precision
    and is refreshed each sweep from a standard-Gamma draw in ``gammas``
    scaled by the current quadratic form. ``x``, ``loglik``, ``acc_sites``
    and (when ``track``) the Welford accumulators ``mean``/``m2`` (counts
    continuing from ``n_prev``) are updated in place; sweep k lands in
    ``draws[keep_idx[k]]`` when ``keep_idx[k] >= 0``. Returns the final tau.
    """
    nsweeps = zs.shape[0]
    nsites = x.shape[0]
    nrep = y.shape[1]
    # Structure quadratic form x'Qx, maintained incrementally below from the
    # same per-site quantities the acceptance ratio needs anyway.
    quad = 0.0
    for i in range(nsites):
        s = qdiag[i] * x[i]
        for ptr in range(qindptr[i], qindptr[i + 1]):
            s += qdata[ptr] * x[qindices[ptr]]
        quad += x[i] * s
    for k in range(nsweeps):
        for i in range(nsites):
            xi = x[i]
            xp = xi + sds[i] * zs[k, i]
            sd = np.exp(0.5 * xp)
            llp = 0.0
            for t in range(nrep):
                z = (y[i, t] - mu) / sd
                llp += -0.5 * z * z - 0.5 * xp - 0.5 * LOG_2PI
            nb = 0.0
            for ptr in range(qindptr[i], qindptr[i + 1]):
                nb += qdata[ptr] * x[qindices[ptr]]
            dq = qdiag[i] * (xp * xp - xi * xi) + 2.0 * (xp - xi) * nb
            if logus[k, i] < (llp - loglik[i]) - 0.5 * tau * dq:
                x[i] = xp
                loglik[i] = llp
                quad += dq
                acc_sites[i] += 1
        tau = gammas[k] / (b_rate + 0.5 * quad)
        tau_out[k] = tau
        if track:
            inv = 1.0 / (n_prev + k + 1)
            for i in range(nsites):
                delta = x[i] - mean[i]
                mean[i] += delta * inv
                m2[i] += delta * (x[i] - mean[i])
        r = keep_idx[k]
        if r >= 0:
            for i in range(nsites):
                draws[r, i] = x[i]
    return tau


PY_IMPLS = {
    "band_chol": _band_chol,
    "band_fwd": _band_fwd,
    "band_bwd": _band_bwd,
    "logvar_loglik": _logvar_loglik,
    "logvar_sweeps": _logvar_sweeps,
}

if NUMBA_ENABLED:
    band_chol = njit(cache=True)(_band_chol)
    band_fwd = njit(cache=True)(_band_fwd)
    band_bwd = njit(cache=True)(_band_bwd)
    logvar_loglik = njit(cache=True)(_logvar_loglik)
    logvar_sweeps = njit(cache=True)(_logvar_sweeps)
else:
    band_chol = _band_chol
    band_fwd = _band_fwd
    band_bwd = _band_bwd
    logvar_loglik = _logvar_loglik
    logvar_sweeps = _logvar_sweeps
