"""Hyperparameter prior densities and the special functions behind them.

Digamma, trigamma and the regularized incomplete gamma are implemented
in-module (upward recurrence to x >= 6 plus asymptotic series; power series
and continued fraction) so the numerical core carries no special-function
dependency. Gamma quantiles are found by bisection on the regularized
incomplete gamma.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LogGammaPrior:
    """Prior for a log-scale parameter phi with exp(phi) ~ Gamma(alpha, gamma).

    Indexable and unpackable as the pair (alpha, gamma).
    """

    alpha: float
    gamma: float

    def __post_init__(self):
        if not (self.alpha > 0.0 and self.gamma > 0.0):
            raise ValueError("LogGammaPrior needs alpha > 0 and gamma > 0")

    def __getitem__(self, i):
        return (self.alpha, self.gamma)[i]

    def __iter__(self):
        return iter((self.alpha, self.gamma))


def _loggamma_params(alpha, gam):
    if gam is None:
        return float(alpha[0]), float(alpha[1])
    return float(alpha), float(gam)


# Asymptotic coefficients: -B_{2n}/(2n) for digamma, B_{2n} for trigamma.
_DIGAMMA_COEF = (
    -1.0 / 12.0,
    1.0 / 120.0,
    -1.0 / 252.0,
    1.0 / 240.0,
    -1.0 / 132.0,
    691.0 / 32760.0,
    -1.0 / 12.0,
)
_TRIGAMMA_COEF = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def _digamma_scalar(x):
    if not x > 0.0:
        raise ValueError("digamma requires x > 0")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    s = 0.0
    p = inv2
    for c in _DIGAMMA_COEF:
        s += c * p
        p *= inv2
    return acc + math.log(x) - 0.5 * inv + s


def _trigamma_scalar(x):
    if not x > 0.0:
        raise ValueError("trigamma requires x > 0")
    acc = 0.0
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    s = inv + 0.5 * inv2
    p = inv * inv2
    for c in _TRIGAMMA_COEF:
        s += c * p
        p *= inv2
    return acc + s


def digamma(x):
    """Digamma function for x > 0; scalar or array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return _digamma_scalar(float(arr))
    out = np.empty(arr.shape)
    flat_in, flat_out = arr.ravel(), out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = _digamma_scalar(flat_in[i])
    return out


def trigamma(x):
    """Trigamma function for x > 0; scalar or array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return _trigamma_scalar(float(arr))
    out = np.empty(arr.shape)
    flat_in, flat_out = arr.ravel(), out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = _trigamma_scalar(flat_in[i])
    return out


def regularized_gamma_p(a, x):
    """Regularized lower incomplete gamma P(a, x), a > 0, x >= 0.

    Power series for x < a + 1, Lentz continued fraction otherwise.
    """
    if not a > 0.0:
        raise ValueError("shape must be positive")
    if x < 0.0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        term = 1.0 / a
        total = term
        n = a
        for _ in range(500):
            n += 1.0
            term *= x / n
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # Continued fraction for Q(a, x) = 1 - P(a, x).
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    q = math.exp(-x + a * math.log(x) - lg) * h
    return 1.0 - q


def gamma_cdf(x, shape, rate):
    return regularized_gamma_p(shape, rate * x)


def gamma_quantile(p, shape, rate):
    """Quantile of the Gamma(shape, rate) distribution by bisection."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    hi = max(shape, 1.0) / rate
    while gamma_cdf(hi, shape, rate) < p:
        hi *= 2.0
        if hi > 1e300:
            raise ValueError("quantile bracket overflow")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gamma_cdf(mid, shape, rate) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def pc_logdensity(tau):
    """Penalized-complexity prior on a precision: log(1/2) - 1.5 log tau - tau^{-1/2}.

    This is the pushforward of a unit-rate exponential prior on the standard
    deviation sigma = tau^{-1/2}; it integrates to one.
    """
    tau = np.asarray(tau, dtype=np.float64)
    out = np.log(0.5) - 1.5 * np.log(tau) - tau**-0.5
    return float(out) if out.ndim == 0 else out


def gamma_logdensity(tau, shape, rate):
    """Log density of Gamma(shape, rate) at tau > 0."""
    tau = np.asarray(tau, dtype=np.float64)
    out = (
        shape * math.log(rate)
        - math.lgamma(shape)
        + (shape - 1.0) * np.log(tau)
        - rate * tau
    )
    return float(out) if out.ndim == 0 else out


def loggamma_logdensity(phi, alpha, gam=None):
    """Log density of phi = log(theta) where theta ~ Gamma(alpha, rate gamma).

    Accepts either a LogGammaPrior (or pair) as the second argument, or the
    two parameters separately.
    """
    alpha, gam = _loggamma_params(alpha, gam)
    phi = np.asarray(phi, dtype=np.float64)
    out = alpha * math.log(gam) - math.lgamma(alpha) + alpha * phi - gam * np.exp(phi)
    return float(out) if out.ndim == 0 else out


def loggamma_moments(alpha, gam=None):
    """Mean and variance of phi = log(theta), theta ~ Gamma(alpha, rate gamma)."""
    alpha, gam = _loggamma_params(alpha, gam)
    return _digamma_scalar(alpha) - math.log(gam), _trigamma_scalar(alpha)


def loggamma_interval(alpha, gam=None, prob=0.95):
    """Central credible interval of the log-gamma distribution."""
    alpha, gam = _loggamma_params(alpha, gam)
    lo = 0.5 * (1.0 - prob)
    return (
        math.log(gamma_quantile(lo, alpha, gam)),
        math.log(gamma_quantile(1.0 - lo, alpha, gam)),
    )


def exp_logdensity_logscale(kappa, rate=1.0):
    """Log density of kappa = log(theta) where theta ~ Exponential(rate)."""
    kappa = np.asarray(kappa, dtype=np.float64)
    out = math.log(rate) - rate * np.exp(kappa) + kappa
    return float(out) if out.ndim == 0 else out


def exp_logdensity(sigma, rate=1.0):
    """Log density of Exponential(rate) at sigma > 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    out = math.log(rate) - rate * sigma
    return float(out) if out.ndim == 0 else out
