"""Max step: per-group Gaussian approximation of the likelihood.

Each group's likelihood (or generalized likelihood) in its latent parameter
vector is collapsed to a Gaussian, in one of two flavors:

* ``"mode"``: mean at the ML mode, precision from the observed information
  (negative Hessian of the group log-likelihood at the mode);
* ``"moment"``: mean and variance of the normalized likelihood function,
  treating it as a density in the latent parameters.

``stack`` reorders the per-group approximations into the parameter-major
layout used by the latent field priors (all first components across groups,
then all second components, ...).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateLikelihoodError,
    DimensionMismatchError,
    MaxIterationsError,
    NonConcaveAtModeError,
    NonFiniteObjectiveError,
)
from .priors import digamma, loggamma_logdensity, loggamma_moments, trigamma
from .sparse import SparseSymMatrix


@dataclass
class GroupApprox:
    """Gaussian approximation of one group's likelihood.

    ``mean`` has length M (the per-group latent dimension), ``precision`` is
    the M x M approximation precision, ``group`` an opaque group identifier.
    """

    mean: np.ndarray
    precision: np.ndarray
    flavor: str
    group: int = 0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.precision = np.atleast_2d(np.asarray(self.precision, dtype=np.float64))
        m = self.mean.size
        if self.precision.shape != (m, m):
            raise DimensionMismatchError("precision shape does not match mean")


@dataclass
class StackedApprox:
    """Parameter-major stack of group approximations.

    ``eta_hat[(m-1)G + i]`` is component m of group i (1-based in the math,
    0-based here). ``precision`` is block diagonal in group-major terms,
    permuted to the parameter-major ordering; ``logdet`` its log-determinant.
    """

    eta_hat: np.ndarray
    precision: SparseSymMatrix
    n_groups: int
    n_params: int
    flavor: str
    logdet: float
    meta: dict = field(default_factory=dict)


def logvar_approx(y, flavor="mode", group=0):
    """Gaussian approximation for a zero-mean normal with unknown log-variance.

    y holds T replicates of N(0, exp(x)); the likelihood in x is collapsed.
    """
    y = np.asarray(y, dtype=np.float64)
    t = y.size
    if t < 2:
        raise DegenerateLikelihoodError("log-variance group needs T >= 2")
    s2 = float(np.mean(y * y))
    if not s2 > 0.0:
        raise DegenerateLikelihoodError("all-zero replicates give no scale information")
    xhat = math.log(s2)
    if flavor == "mode":
        return GroupApprox([xhat], [[t / 2.0]], flavor, group)
    if flavor == "moment":
        # Normalized likelihood of x is log-inverse-gamma(T/2, sum(y^2)/2).
        mean = xhat + math.log(t / 2.0) - digamma(t / 2.0)
        var = trigamma(t / 2.0)
        return GroupApprox([mean], [[1.0 / var]], flavor, group)
    raise ValueError(f"unknown flavor {flavor!r}")


def linreg_approx(y, f_design, flavor="mode", group=0):
    """Gaussian approximation for a linear model with unknown log-variance.

    ``f_design`` is the T x p design matrix (intercept column included,
    covariates centered by the caller); the latent vector is
    (coefficients..., log-variance), so M = p + 1.
    """
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(f_design, dtype=np.float64)
    t, p = f.shape
    if y.size != t:
        raise DimensionMismatchError("response and design have different lengths")
    if t <= p:
        raise DegenerateLikelihoodError("need more replicates than coefficients")
    ftf = f.T @ f
    beta, *_ = np.linalg.lstsq(f, y, rcond=None)
    if np.linalg.matrix_rank(ftf) < p:
        raise DegenerateLikelihoodError("design matrix is rank deficient")
    resid = y - f @ beta
    rss = float(resid @ resid)
    if not rss > 0.0:
        raise DegenerateLikelihoodError("zero residual variance (exact fit)")
    if flavor == "mode":
        tau_hat = math.log(rss / t)
        prec = np.zeros((p + 1, p + 1))
        prec[:p, :p] = math.exp(-tau_hat) * ftf
        prec[p, p] = t / 2.0
        return GroupApprox(np.append(beta, tau_hat), prec, flavor, group)
    if flavor == "moment":
        if t <= p + 2:
            raise DegenerateLikelihoodError("moment flavor needs T > p + 2")
        dof = t - p
        s2 = rss / dof
        # Coefficients: multivariate t moments; log-variance: log-inverse-gamma.
        cov_beta = (dof / (dof - 2.0)) * s2 * np.linalg.inv(ftf)
        prec = np.zeros((p + 1, p + 1))
        prec[:p, :p] = np.linalg.inv(cov_beta)
        tau_mean = math.log(s2) + math.log(dof / 2.0) - digamma(dof / 2.0)
        prec[p, p] = 1.0 / trigamma(dof / 2.0)
        return GroupApprox(np.append(beta, tau_mean), prec, flavor, group)
    raise ValueError(f"unknown flavor {flavor!r}")


def poisson_approx(y, prior=None, flavor="mode", group=0):
    """Gaussian approximation for a Poisson count with log-rate latent.

    ``prior`` is an optional (alpha, gamma) log-gamma stabilizer added to the
    likelihood (generalized likelihood). Without it, y must be positive.
    """
    y = int(y)
    if y < 0:
        raise DegenerateLikelihoodError("negative count")
    alpha, gam = (0.0, 0.0) if prior is None else (float(prior[0]), float(prior[1]))
    a = alpha + y
    if a <= 0.0:
        raise DegenerateLikelihoodError(
            "zero count without a stabilizing prior has no mode"
        )
    if flavor == "mode":
        mean = math.log(a) - math.log(gam + 1.0)
        return GroupApprox([mean], [[a]], flavor, group)
    if flavor == "moment":
        # Normalized generalized likelihood of eta is log-gamma(a, gam + 1).
        mean = digamma(a) - math.log(gam + 1.0)
        var = trigamma(a)
        return GroupApprox([mean], [[1.0 / var]], flavor, group)
    raise ValueError(f"unknown flavor {flavor!r}")


def _fd_steps(v):
    return np.maximum(1e-5, 1e-5 * np.abs(v))


def _gradient(fun, v, f0):
    h = _fd_steps(v)
    g = np.zeros_like(v)
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = h[k]
        g[k] = (fun(v + e) - fun(v - e)) / (2.0 * h[k])
    return g


def _hessian(fun, v, f0):
    h = _fd_steps(v)
    d = v.size
    hess = np.zeros((d, d))
    for k in range(d):
        ek = np.zeros(d)
        ek[k] = h[k]
        hess[k, k] = (fun(v + ek) - 2.0 * f0 + fun(v - ek)) / (h[k] * h[k])
        for j in range(k + 1, d):
            ej = np.zeros(d)
            ej[j] = h[j]
            val = (
                fun(v + ek + ej) - fun(v + ek - ej) - fun(v - ek + ej) + fun(v - ek - ej)
            ) / (4.0 * h[k] * h[j])
            hess[k, j] = val
            hess[j, k] = val
    return hess


def numeric_approx(loglik, init, flavor="mode", max_iter=100, grad_tol=1e-8, group=0):
    """Mode/curvature approximation of an arbitrary smooth log-likelihood.

    Newton iteration with central finite differences (step
    max(1e-5, 1e-5 |v_k|) per coordinate), stopping when the gradient
    max-norm falls below ``grad_tol``. The Hessian at the stopping point must
    be negative definite.
    """
    if flavor != "mode":
        raise ValueError("numeric approximation supports the mode flavor only")
    v = np.atleast_1d(np.asarray(init, dtype=np.float64)).copy()
    f0 = loglik(v)
    if not np.isfinite(f0):
        raise NonFiniteObjectiveError("objective not finite at the starting point")
    converged = False
    for _ in range(max_iter):
        g = _gradient(loglik, v, f0)
        if not np.all(np.isfinite(g)):
            raise NonFiniteObjectiveError("gradient not finite")
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            break
        hess = _hessian(loglik, v, f0)
        neg = -hess
        step = None
        ridge = 0.0
        for _ in range(12):
            try:
                np.linalg.cholesky(neg + ridge * np.eye(v.size))
                step = np.linalg.solve(neg + ridge * np.eye(v.size), g)
                break
            except np.linalg.LinAlgError:
                ridge = max(1e-8, ridge * 10.0 if ridge else 1e-8)
        if step is None:
            raise NonConcaveAtModeError("could not produce an ascent direction")
        t = 1.0
        while t > 1e-10:
            f_new = loglik(v + t * step)
            if np.isfinite(f_new) and f_new >= f0:
                break
            t *= 0.5
        if t <= 1e-10:
            # No ascent possible; treat current point as the stopping point.
            break
        v = v + t * step
        f0 = f_new
    g = _gradient(loglik, v, f0)
    if np.max(np.abs(g)) >= max(grad_tol, 1e-6):
        if not converged:
            raise MaxIterationsError("Newton iteration did not converge")
    hess = _hessian(loglik, v, f0)
    neg = -hess
    try:
        np.linalg.cholesky(neg)
    except np.linalg.LinAlgError:
        raise NonConcaveAtModeError("Hessian at the stopping point is not negative definite")
    return GroupApprox(v, neg, "mode", group)


def treg_approx(y, x_design, prior_phi=(2.0, 0.2), group=0):
    """Mode/curvature approximation for t-distributed regression.

    Latent vector per group: (coefficients..., log-scale tau, log-dof phi).
    The log-gamma prior on phi regularizes the otherwise flat degrees-of-
    freedom direction (generalized likelihood).
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x_design, dtype=np.float64)
    n, p = x.shape
    if y.size != n:
        raise DimensionMismatchError("response and design have different lengths")
    alpha, gam = float(prior_phi[0]), float(prior_phi[1])

    def loglik(v):
        beta = v[:p]
        tau = v[p]
        phi = v[p + 1]
        if abs(tau) > 50.0 or abs(phi) > 50.0:
            return -np.inf
        dof = math.exp(phi)
        resid = y - x @ beta
        z2 = resid * resid * math.exp(-2.0 * tau)
        const = (
            math.lgamma((dof + 1.0) / 2.0)
            - math.lgamma(dof / 2.0)
            - 0.5 * math.log(math.pi * dof)
            - tau
        )
        ll = n * const - 0.5 * (dof + 1.0) * float(np.sum(np.log1p(z2 / dof)))
        return ll + loggamma_logdensity(phi, alpha, gam)

    beta0, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid0 = y - x @ beta0
    rss0 = float(resid0 @ resid0)
    if not rss0 > 0.0:
        raise DegenerateLikelihoodError("zero residual variance (exact fit)")
    tau0 = 0.5 * math.log(rss0 / max(n - p, 1))
    phi0 = loggamma_moments(alpha, gam)[0]
    init = np.concatenate([beta0, [tau0, phi0]])
    return numeric_approx(loglik, init, group=group)


def stack(groups):
    """Stack group approximations into the parameter-major pseudo data.

    Returns a :class:`StackedApprox` whose precision is the block-diagonal
    group precision permuted so that component m of group i lands at index
    m*G + i (0-based).
    """
    groups = list(groups)
    if not groups:
        raise DimensionMismatchError("stack needs at least one group")
    n_params = groups[0].mean.size
    flavor = groups[0].flavor
    n_groups = len(groups)
    rows, cols, vals = [], [], []
    eta = np.empty(n_params * n_groups)
    logdet = 0.0
    for i, ga in enumerate(groups):
        if ga.mean.size != n_params:
            raise DimensionMismatchError("groups have inconsistent latent dimension")
        if ga.flavor != flavor:
            raise DimensionMismatchError("groups have inconsistent flavors")
        for m in range(n_params):
            eta[m * n_groups + i] = ga.mean[m]
            for m2 in range(m, n_params):
                v = ga.precision[m, m2]
                if v != 0.0:
                    rows.append(m * n_groups + i)
                    cols.append(m2 * n_groups + i)
                    vals.append(v)
        sign, ld = np.linalg.slogdet(ga.precision)
        if sign <= 0:
            raise DegenerateLikelihoodError(
                f"group {ga.group} precision is not positive definite"
            )
        logdet += ld
    precision = SparseSymMatrix(
        n_params * n_groups,
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=np.float64),
    )
    return StackedApprox(eta, precision, n_groups, n_params, flavor, float(logdet))
