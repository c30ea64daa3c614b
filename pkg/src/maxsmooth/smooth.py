"""Smooth step: exact conjugate inference in the Gaussian pseudo model.

The stacked Max-step output eta_hat is treated as Gaussian data with known
noise precision. The latent vector is x = (eta, nu) where eta carries the
per-group parameters and nu the smoothing fields behind them; when the model
declares eps_zero (no eta-level noise), eta = Z nu exactly and inference runs
directly on nu.

Hyperparameters are handled on the log scale kappa = log(theta) internally;
priors are supplied on the theta scale and the Jacobian is added centrally,
in exactly one place (``_log_posterior_kappa``).
"""

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import sparse
from .errors import DimensionMismatchError, NonConcaveAtModeError, NotPositiveDefiniteError
from .maxstep import StackedApprox
from .sparse import SparseSymMatrix

LOG_2PI = float(np.log(2.0 * np.pi))

FACTOR_CACHE_SIZE = 64


@dataclass
class HyperDesc:
    """One hyperparameter: name, log prior density on the theta scale, initial guess."""

    name: str
    log_prior: Callable[[float], float]
    init: float = 1.0


@dataclass
class ThetaDraws:
    theta: np.ndarray  # (S, d), original scale
    kappa: np.ndarray  # (S, d), log scale
    logpost: np.ndarray  # (S,) unnormalized log posterior values
    names: list
    method: str
    diagnostics: dict = field(default_factory=dict)


@dataclass
class LatentDraws:
    draws: np.ndarray  # (S, dim_x)
    index_map: dict  # name -> slice; names partition the coordinates
    names: list

    def block(self, name):
        return self.draws[:, self.index_map[name]]


@dataclass
class FitResult:
    theta: ThetaDraws
    latent: LatentDraws
    diagnostics: dict = field(default_factory=dict)


class PseudoModel:
    """Gaussian-Gaussian pseudo model assembled from a Max-step stack.

    Parameters
    ----------
    stacked : StackedApprox
        Parameter-major pseudo observations eta_hat with noise precision.
    z : scipy sparse matrix or None
        Maps nu to the mean of eta; None means the identity.
    mu_nu : array
        Prior mean of nu.
    q_nu : callable theta -> SparseSymMatrix
        Prior precision of nu (may be intrinsic/singular).
    log_prior_nu : callable (nu, theta) -> float
        Log prior density of nu including normalization; intrinsic blocks use
        their eigenvalue-corrected proper density.
    q_eps_diag : callable theta -> array, or None
        Diagonal of the eta-level noise precision; None iff eps_zero.
    hypers : list of HyperDesc
    eps_zero : bool
        When True the model has no eta-level noise and inference runs on nu.
    theta_blocks : list of lists or None
        Declared independent hyperparameter blocks (grid sampling).
    index_map : dict name -> slice
        Named coordinate blocks of the latent draw vector.
    """

    def __init__(
        self,
        stacked: StackedApprox,
        z,
        mu_nu,
        q_nu,
        log_prior_nu,
        hypers,
        eps_zero,
        q_eps_diag=None,
        theta_blocks=None,
        index_map=None,
        name="pseudo",
    ):
        self.stacked = stacked
        self.z = z.tocsr() if z is not None else None
        self.mu_nu = np.asarray(mu_nu, dtype=np.float64)
        self.q_nu = q_nu
        self.log_prior_nu = log_prior_nu
        self.hypers = list(hypers)
        self.eps_zero = bool(eps_zero)
        self.q_eps_diag = q_eps_diag
        self.theta_blocks = theta_blocks
        self.name = name
        self.dim_eta = stacked.eta_hat.size
        self.dim_nu = self.mu_nu.size
        if self.z is not None and self.z.shape != (self.dim_eta, self.dim_nu):
            raise DimensionMismatchError("Z shape does not match (eta, nu) dims")
        if self.z is None and self.dim_eta != self.dim_nu:
            raise DimensionMismatchError("identity Z needs dim_eta == dim_nu")
        if self.eps_zero and q_eps_diag is not None:
            raise DimensionMismatchError("eps_zero models must not carry Q_eps")
        if not self.eps_zero and q_eps_diag is None:
            raise DimensionMismatchError("non-eps_zero models need q_eps_diag")
        self.dim_x = self.dim_nu if self.eps_zero else self.dim_eta + self.dim_nu
        self.index_map = index_map or {"x": slice(0, self.dim_x)}
        self._qeta_csr = stacked.precision.to_scipy_full()
        self._qeta_diag = stacked.precision.diag()
        self._eta_quad = float(
            stacked.eta_hat @ (self._qeta_csr @ stacked.eta_hat)
        )
        self._cache = OrderedDict()

    @property
    def n_hyper(self):
        return len(self.hypers)

    def hyper_names(self):
        return [h.name for h in self.hypers]

    def _z_matvec(self, v):
        return v if self.z is None else self.z @ v

    def _zt_matvec(self, v):
        return v if self.z is None else self.z.T @ v

    def log_prior_theta(self, theta):
        total = 0.0
        for h, t in zip(self.hypers, theta):
            if not t > 0.0:
                return -np.inf
            total += float(h.log_prior(float(t)))
        return total


def conditional_system(m, theta, form=None):
    """Precision matrix and canonical mean of the latent conditional.

    Returns (Q, b) with posterior x | eta_hat, theta ~ N(Q^{-1} b, Q^{-1}).
    ``form`` is "x" (joint (eta, nu)) or "nu"; defaults to "nu" for eps_zero
    models and "x" otherwise. The "nu" form with nonzero eps requires M = 1
    (diagonal noise precision).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if form is None:
        form = "nu" if m.eps_zero else "x"
    qnu = m.q_nu(theta)
    if qnu.dim != m.dim_nu:
        raise DimensionMismatchError("q_nu returned wrong dimension")
    b_nu_prior = qnu.matvec(m.mu_nu) if np.any(m.mu_nu) else np.zeros(m.dim_nu)
    if form == "nu":
        if m.eps_zero:
            data_prec = m._qeta_csr
            data_diag = None
        else:
            if m.stacked.n_params != 1:
                raise DimensionMismatchError(
                    "nu form with nonzero eps requires scalar groups (M = 1)"
                )
            qe = np.asarray(m.q_eps_diag(theta), dtype=np.float64)
            data_diag = 1.0 / (1.0 / m._qeta_diag + 1.0 / qe)
            data_prec = sp.diags(data_diag, format="csr")
        if m.z is None:
            ztdz = data_prec
            b = b_nu_prior + (data_prec @ m.stacked.eta_hat)
        else:
            ztdz = (m.z.T @ data_prec @ m.z).tocsr()
            b = b_nu_prior + m.z.T @ (data_prec @ m.stacked.eta_hat)
        q = SparseSymMatrix.from_scipy(qnu.to_scipy_full() + ztdz)
        return q, b
    if form == "x":
        if m.eps_zero:
            raise DimensionMismatchError("x form undefined for eps_zero models")
        qe = np.asarray(m.q_eps_diag(theta), dtype=np.float64)
        qe_mat = sp.diags(qe, format="csr")
        z = m.z if m.z is not None else sp.identity(m.dim_nu, format="csr")
        a11 = qe_mat + m._qeta_csr
        a12 = -(qe_mat @ z)
        a22 = qnu.to_scipy_full() + (z.T @ qe_mat @ z)
        q = SparseSymMatrix.from_scipy(
            sp.bmat([[a11, a12], [a12.T, a22]], format="csr")
        )
        b = np.concatenate([m._qeta_csr @ m.stacked.eta_hat, b_nu_prior])
        return q, b
    raise ValueError(f"unknown form {form!r}")


def _factorized_system(m, theta, form=None):
    """Cached (Q, b, factor, mean) for the latent conditional at theta."""
    theta = np.asarray(theta, dtype=np.float64)
    key = (form, theta.tobytes())
    hit = m._cache.get(key)
    if hit is not None:
        m._cache.move_to_end(key)
        return hit
    q, b = conditional_system(m, theta, form=form)
    factor = sparse.chol(q)
    mean = sparse.solve(factor, b)
    entry = (q, b, factor, mean)
    m._cache[key] = entry
    if len(m._cache) > FACTOR_CACHE_SIZE:
        m._cache.popitem(last=False)
    return entry


def theta_log_marginal(m, theta, at_x=None, form=None):
    """Unnormalized log posterior of theta given the pseudo observations.

    Evaluates log pi(theta) + log pi(eta_hat | x, theta) + log pi(x | theta)
    - log pi(x | eta_hat, theta), which is x-independent; the default
    evaluation point is x = 0. Returns -inf when theta is outside the prior
    support or the conditional precision cannot be factorized.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != m.n_hyper:
        raise DimensionMismatchError("theta has wrong length")
    lp_theta = m.log_prior_theta(theta)
    if not np.isfinite(lp_theta):
        return -np.inf
    if form is None:
        form = "nu" if m.eps_zero else "x"
    try:
        q, b, factor, mean = _factorized_system(m, theta, form=form)
    except NotPositiveDefiniteError:
        return -np.inf
    st = m.stacked
    p = m.dim_eta
    if form == "nu":
        nu = np.zeros(m.dim_nu) if at_x is None else np.asarray(at_x, dtype=np.float64)
        if m.eps_zero:
            data_logdet = st.logdet
            resid = st.eta_hat - m._z_matvec(nu)
            if at_x is None and m.z is None and not np.any(nu):
                data_quad = m._eta_quad
            else:
                data_quad = float(resid @ (m._qeta_csr @ resid))
        else:
            qe = np.asarray(m.q_eps_diag(theta), dtype=np.float64)
            dcomb = 1.0 / (1.0 / m._qeta_diag + 1.0 / qe)
            data_logdet = float(np.sum(np.log(dcomb)))
            resid = st.eta_hat - m._z_matvec(nu)
            data_quad = float(np.sum(dcomb * resid * resid))
        log_data = 0.5 * data_logdet - 0.5 * p * LOG_2PI - 0.5 * data_quad
        log_prior_x = m.log_prior_nu(nu, theta)
        quad_mean = float(b @ mean)
        if np.any(nu):
            quad = q.quad_form(nu) - 2.0 * float(b @ nu) + quad_mean
        else:
            quad = quad_mean
        log_cond = (
            0.5 * sparse.logdet(factor) - 0.5 * m.dim_nu * LOG_2PI - 0.5 * quad
        )
        return lp_theta + log_data + log_prior_x - log_cond
    # x form
    if at_x is None:
        eta = np.zeros(m.dim_eta)
        nu = np.zeros(m.dim_nu)
        x = None
    else:
        at_x = np.asarray(at_x, dtype=np.float64)
        eta, nu = at_x[: m.dim_eta], at_x[m.dim_eta :]
        x = at_x
    qe = np.asarray(m.q_eps_diag(theta), dtype=np.float64)
    if x is None:
        data_quad = m._eta_quad
        eps_quad = 0.0
    else:
        resid = st.eta_hat - eta
        data_quad = float(resid @ (m._qeta_csr @ resid))
        eresid = eta - m._z_matvec(nu)
        eps_quad = float(np.sum(qe * eresid * eresid))
    log_data = 0.5 * st.logdet - 0.5 * p * LOG_2PI - 0.5 * data_quad
    log_eps = 0.5 * float(np.sum(np.log(qe))) - 0.5 * p * LOG_2PI - 0.5 * eps_quad
    log_prior_x = m.log_prior_nu(nu, theta) + log_eps
    quad_mean = float(b @ mean)
    if x is None:
        quad = quad_mean
    else:
        quad = q.quad_form(x) - 2.0 * float(b @ x) + quad_mean
    log_cond = 0.5 * sparse.logdet(factor) - 0.5 * q.dim * LOG_2PI - 0.5 * quad
    return lp_theta + log_data + log_prior_x - log_cond


def _log_posterior_kappa(m, kappa, form=None):
    """Log posterior density of kappa = log(theta): marginal + Jacobian."""
    theta = np.exp(np.asarray(kappa, dtype=np.float64))
    val = theta_log_marginal(m, theta, form=form)
    if not np.isfinite(val):
        return -np.inf
    return val + float(np.sum(kappa))


def _coordinate_ascent(fun, kappa0, step0=0.8, tol=1e-5, max_rounds=60):
    """Derivative-free coordinate ascent with adaptive step shrinking."""
    kappa = np.asarray(kappa0, dtype=np.float64).copy()
    f0 = fun(kappa)
    if not np.isfinite(f0):
        raise ValueError("posterior not finite at the starting point")
    d = kappa.size
    steps = np.full(d, float(step0))
    evals = 1
    for _ in range(max_rounds):
        improved = False
        for k in range(d):
            for sgn in (1.0, -1.0):
                cand = kappa.copy()
                cand[k] += sgn * steps[k]
                fc = fun(cand)
                evals += 1
                if fc > f0 + 1e-12:
                    kappa, f0 = cand, fc
                    improved = True
                    while True:
                        cand = kappa.copy()
                        cand[k] += sgn * steps[k]
                        fc = fun(cand)
                        evals += 1
                        if fc > f0 + 1e-12:
                            kappa, f0 = cand, fc
                        else:
                            break
                    break
        if not improved:
            steps *= 0.5
            if steps.max() < tol:
                break
    return kappa, f0, evals


def _laplace_sd(fun, kappa, f0, h=0.1):
    d = kappa.size
    sds = np.empty(d)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        d2 = (fun(kappa + e) - 2.0 * f0 + fun(kappa - e)) / (h * h)
        sds[k] = 1.0 / math.sqrt(-d2) if d2 < 0 else 0.5
    return sds


def _dense_neg_hessian(fun, kappa, h=0.05):
    d = kappa.size
    f0 = fun(kappa)
    hess = np.zeros((d, d))
    for k in range(d):
        ek = np.zeros(d)
        ek[k] = h
        hess[k, k] = (fun(kappa + ek) - 2.0 * f0 + fun(kappa - ek)) / (h * h)
        for j in range(k + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            v = (
                fun(kappa + ek + ej)
                - fun(kappa + ek - ej)
                - fun(kappa - ek + ej)
                + fun(kappa - ek - ej)
            ) / (4.0 * h * h)
            hess[k, j] = v
            hess[j, k] = v
    return -hess


def grid_sample_theta(m, n_draws, rng, points=41, span=4.0, max_cells=10**6, blocks=None):
    """Grid-based posterior sampling of the hyperparameters.

    Axes are per-dimension grids of ``points`` values centered at the
    posterior mode (coordinate ascent on the log scale), spanning
    mode +/- span * Laplace sd. Dimensions factorize over the model's
    declared independent blocks; within a block the full product grid is
    evaluated (errors if it exceeds ``max_cells``). Draws are i.i.d.
    inverse-CDF categorical draws over cells in lexicographic order.
    """
    d = m.n_hyper
    fun = lambda k: _log_posterior_kappa(m, k)
    kappa0 = np.log([h.init for h in m.hypers])
    mode, f_mode, evals = _coordinate_ascent(fun, kappa0)
    sds = _laplace_sd(fun, mode, f_mode)
    blocks = blocks if blocks is not None else (m.theta_blocks or [list(range(d))])
    covered = sorted(i for blk in blocks for i in blk)
    if covered != list(range(d)):
        raise DimensionMismatchError("theta blocks must partition the dimensions")
    axes = [mode[k] + np.linspace(-span, span, points) * sds[k] for k in range(d)]
    kappa_draws = np.tile(mode, (n_draws, 1))
    logpost = np.full(n_draws, -float(len(blocks) - 1) * f_mode)
    block_densities = []
    for blk in blocks:
        shape = tuple(points for _ in blk)
        n_cells = int(np.prod(shape))
        if n_cells > max_cells:
            raise ValueError(
                f"grid block {blk} has {n_cells} cells, exceeding the cap {max_cells}"
            )
        logvals = np.empty(n_cells)
        kappa_eval = mode.copy()
        for flat, idx in enumerate(np.ndindex(shape)):
            for pos, k in enumerate(blk):
                kappa_eval[k] = axes[k][idx[pos]]
            logvals[flat] = fun(kappa_eval)
        kappa_eval[list(blk)] = mode[list(blk)]
        finite = np.isfinite(logvals)
        shift = logvals[finite].max()
        w = np.where(finite, np.exp(logvals - shift), 0.0)
        w /= w.sum()
        cum = np.cumsum(w)
        cum[-1] = 1.0
        cells = np.searchsorted(cum, rng.random(n_draws), side="right")
        unraveled = np.unravel_index(cells, shape)
        for pos, k in enumerate(blk):
            kappa_draws[:, k] = axes[k][unraveled[pos]]
        logpost += logvals[cells]
        block_densities.append(
            {"dims": list(blk), "log_density": logvals.reshape(shape)}
        )
    theta = np.exp(kappa_draws)
    diagnostics = {
        "mode_kappa": mode,
        "mode_logpost": f_mode,
        "laplace_sd": sds,
        "axes_kappa": axes,
        "blocks": [list(b) for b in blocks],
        "block_densities": block_densities,
        "mode_evals": evals,
    }
    return ThetaDraws(
        theta, kappa_draws, logpost, m.hyper_names(), "grid", diagnostics
    )


def random_walk_metropolis(log_target, kappa0, prop_chol, n_iter, rng):
    """Random-walk Metropolis core on a generic log target.

    Per iteration: one standard-normal vector for the proposal, then one
    uniform for the accept decision. Returns (chain, log-target trace,
    acceptance count).
    """
    kappa = np.asarray(kappa0, dtype=np.float64).copy()
    d = kappa.size
    lp = float(log_target(kappa))
    chain = np.empty((n_iter, d))
    lps = np.empty(n_iter)
    accepted = 0
    for i in range(n_iter):
        cand = kappa + prop_chol @ rng.standard_normal(d)
        lpc = float(log_target(cand))
        if np.log(rng.random()) < lpc - lp:
            kappa, lp = cand, lpc
            accepted += 1
        chain[i] = kappa
        lps[i] = lp
    return chain, lps, accepted


def metropolis_sample_theta(m, n_draws, rng, burnin=None, scale=None):
    """Random-walk Metropolis sampling of the hyperparameters on the log scale.

    The proposal covariance is (2.382^2 / d) times the inverse negative
    Hessian of the log posterior at its mode; errors if that Hessian is not
    positive definite. Burn-in defaults to n_draws / 5.
    """
    if burnin is None:
        burnin = max(1, n_draws // 5)
    d = m.n_hyper
    fun = lambda k: _log_posterior_kappa(m, k)
    kappa0 = np.log([h.init for h in m.hypers])
    mode, f_mode, _ = _coordinate_ascent(fun, kappa0)
    neg_hess = _dense_neg_hessian(fun, mode)
    try:
        np.linalg.cholesky(neg_hess)
    except np.linalg.LinAlgError:
        raise NonConcaveAtModeError(
            "log posterior Hessian at the mode is not negative definite"
        )
    cov = np.linalg.inv(neg_hess) * (2.382**2 / d)
    if scale is not None:
        cov = cov * float(scale) ** 2
    prop_chol = np.linalg.cholesky(cov)
    chain, lps, accepted = random_walk_metropolis(
        fun, mode, prop_chol, burnin + n_draws, rng
    )
    kappa_draws = chain[burnin:]
    logpost = lps[burnin:]
    centered = logpost - logpost.mean()
    denom = float(centered @ centered)
    lag1 = float(centered[:-1] @ centered[1:]) / denom if denom > 0 else 1.0
    diagnostics = {
        "mode_kappa": mode,
        "mode_logpost": f_mode,
        "accept_rate": accepted / (burnin + n_draws),
        "lag1_autocorr_logpost": lag1,
        "burnin": burnin,
    }
    return ThetaDraws(
        np.exp(kappa_draws),
        kappa_draws,
        logpost.copy(),
        m.hyper_names(),
        "metropolis",
        diagnostics,
    )


def sample_latent(m, theta_draws, rng):
    """One latent draw per hyperparameter draw, via the factorized conditional.

    Factorizations are cached per distinct theta (LRU, 64 entries). Consumes
    exactly one standard-normal vector of length dim_x per draw.
    """
    thetas = np.atleast_2d(theta_draws.theta)
    n = thetas.shape[0]
    out = np.empty((n, m.dim_x))
    for s in range(n):
        _, b, factor, _ = _factorized_system(m, thetas[s])
        out[s] = sparse.sample_canonical(factor, b, rng)
    names = list(m.index_map.keys())
    return LatentDraws(out, dict(m.index_map), names)


def _moments_from_dense(m, theta):
    q, b = conditional_system(m, theta)
    if q.dim > 2000:
        raise ValueError("dense conditional moments capped at dimension 2000")
    qd = q.to_dense()
    cov = np.linalg.inv(qd)
    mean = cov @ b
    return mean, cov


def eta_conditional_moments(m, theta):
    """Posterior mean and precision of eta given eta_hat and theta (dense)."""
    mean, cov = _moments_from_dense(m, theta)
    if m.eps_zero:
        if m.z is None:
            return mean, np.linalg.inv(cov)
        mean_eta = m.z @ mean
        cov_eta = m.z @ cov @ m.z.T.toarray() if sp.issparse(m.z) else m.z @ cov @ m.z.T
        cov_eta = np.asarray(cov_eta)
        # eta = Z nu exactly: Z with dim_nu < dim_eta makes cov_eta rank
        # deficient, so report the precision on the supported subspace.
        return mean_eta, np.linalg.pinv(cov_eta)
    p = m.dim_eta
    return mean[:p], np.linalg.inv(cov[:p, :p])


def nu_conditional_moments(m, theta):
    """Posterior mean and precision of nu given eta_hat and theta (dense)."""
    mean, cov = _moments_from_dense(m, theta)
    if m.eps_zero:
        return mean, np.linalg.inv(cov)
    p = m.dim_eta
    return mean[p:], np.linalg.inv(cov[p:, p:])


def fit(m, n_draws, rng, sampler="grid", burnin=None, points=41, span=4.0):
    """Run the Smooth step end to end: theta sampling, then latent draws."""
    t0 = time.perf_counter()
    if sampler == "grid":
        theta_draws = grid_sample_theta(m, n_draws, rng, points=points, span=span)
    elif sampler == "metropolis":
        theta_draws = metropolis_sample_theta(m, n_draws, rng, burnin=burnin)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    t1 = time.perf_counter()
    latent = sample_latent(m, theta_draws, rng)
    t2 = time.perf_counter()
    diagnostics = {
        "sampler": sampler,
        "theta_seconds": t1 - t0,
        "latent_seconds": t2 - t1,
    }
    diagnostics.update(theta_draws.diagnostics)
    return FitResult(theta_draws, latent, diagnostics)
