"""Distribution functions used by the score mappers.

Scalar kernels are written against :mod:`math`; the public functions accept
scalars or array-likes and broadcast like numpy ufuncs.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .exceptions import DomainError, NumericalError, ParameterError

__all__ = [
    "BetaParams",
    "GammaParams",
    "ExpParams",
    "NormalParams",
    "beta_fn",
    "log_beta",
    "beta_cdf",
    "beta_ppf",
    "gamma_cdf",
    "gamma_ppf",
    "exp_cdf",
    "exp_ppf",
    "normal_cdf",
    "normal_ppf",
]

CF_TOL = 1e-14
CF_MAX_ITER = 300
_FPMIN = 1e-300


def _broadcasting(func):
    """Lift a scalar kernel to array inputs; scalar in, float out."""
    vec = np.vectorize(func, otypes=[float])

    @functools.wraps(func)
    def wrapper(*args):
        if all(np.ndim(a) == 0 for a in args):
            return func(*(float(a) for a in args))
        return vec(*args)

    return wrapper


def _check_positive(name, value):
    if not (value > 0.0) or math.isinf(value):
        raise ParameterError(f"{name} must be a finite positive number, got {value!r}")


# -- Beta ---------------------------------------------------------------------


def log_beta(a, b):
    """Natural log of the Beta function, via ``math.lgamma``."""
    _check_positive("alpha", a)
    _check_positive("beta", b)
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@_broadcasting
def beta_fn(a, b):
    """Beta function B(a, b) = Gamma(a) Gamma(b) / Gamma(a + b)."""
    return math.exp(log_beta(a, b))


def _beta_contfrac(a, b, x):
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return h
    raise NumericalError(
        f"incomplete beta continued fraction did not converge in {CF_MAX_ITER} "
        f"iterations (x={x}, alpha={a}, beta={b})"
    )


@_broadcasting
def beta_cdf(x, a, b):
    """Regularized incomplete beta I_x(a, b).

    Clamped outside the unit interval: 0 below 0, 1 above 1.
    """
    _check_positive("alpha", a)
    _check_positive("beta", b)
    if math.isnan(x):
        raise DomainError("x must not be NaN")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    # exact reductions; the continued fraction loses a couple of ulps here
    if b == 1.0:
        return x**a
    if a == 1.0:
        return -math.expm1(b * math.log1p(-x))
    lnb = log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        front = math.exp(a * math.log(x) + b * math.log1p(-x) - lnb)
        return front * _beta_contfrac(a, b, x) / a
    y = 1.0 - x
    front = math.exp(b * math.log(y) + a * math.log(x) - lnb)
    return 1.0 - front * _beta_contfrac(b, a, y) / b


def _bisect(cdf, p, lo, hi, *, rel=1e-15, max_iter=400):
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= rel * max(abs(mid), 1e-300) or mid in (lo, hi):
            return mid
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _check_prob(p):
    if math.isnan(p) or p < 0.0 or p > 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {p!r}")


@_broadcasting
def beta_ppf(p, a, b):
    """Inverse of :func:`beta_cdf` in its first argument."""
    _check_positive("alpha", a)
    _check_positive("beta", b)
    _check_prob(p)
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    return _bisect(lambda t: beta_cdf(t, a, b), p, 0.0, 1.0)


# -- Gamma --------------------------------------------------------------------


def _lower_gamma_series(a, x):
    ap = a
    total = delta = 1.0 / a
    for _ in range(CF_MAX_ITER):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * CF_TOL:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError(
        f"incomplete gamma series did not converge in {CF_MAX_ITER} iterations "
        f"(x={x}, alpha={a})"
    )


def _upper_gamma_contfrac(a, x):
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, CF_MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise NumericalError(
        f"incomplete gamma continued fraction did not converge in {CF_MAX_ITER} "
        f"iterations (x={x}, alpha={a})"
    )


def _regularized_lower_gamma(a, x):
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return _lower_gamma_series(a, x)
    return 1.0 - _upper_gamma_contfrac(a, x)


@_broadcasting
def gamma_cdf(x, a, scale):
    """Gamma CDF with shape ``a`` and scale ``scale``: P(a, x / scale)."""
    _check_positive("alpha", a)
    _check_positive("beta", scale)
    if math.isnan(x) or x < 0.0:
        raise DomainError(f"gamma_cdf requires x >= 0, got {x!r}")
    return _regularized_lower_gamma(a, x / scale)


@_broadcasting
def gamma_ppf(p, a, scale):
    """Inverse of :func:`gamma_cdf` in its first argument."""
    _check_positive("alpha", a)
    _check_positive("beta", scale)
    _check_prob(p)
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return math.inf
    hi = max(a, 1.0)
    while _regularized_lower_gamma(a, hi) < p:
        hi *= 2.0
    return scale * _bisect(lambda t: _regularized_lower_gamma(a, t), p, 0.0, hi)


# -- Exponential / Normal -----------------------------------------------------


@_broadcasting
def exp_cdf(x, rate):
    """Exponential CDF 1 - exp(-rate * x)."""
    _check_positive("lambda", rate)
    if math.isnan(x) or x < 0.0:
        raise DomainError(f"exp_cdf requires x >= 0, got {x!r}")
    return -math.expm1(-rate * x)


@_broadcasting
def exp_ppf(p, rate):
    _check_positive("lambda", rate)
    _check_prob(p)
    if p == 1.0:
        return math.inf
    return -math.log1p(-p) / rate


@_broadcasting
def normal_cdf(x):
    """Standard normal CDF."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@_broadcasting
def normal_ppf(p):
    _check_prob(p)
    if p == 0.0:
        return -math.inf
    if p == 1.0:
        return math.inf
    return NormalDist().inv_cdf(p)


# -- parameter records --------------------------------------------------------


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        _check_positive("alpha", self.alpha)
        _check_positive("beta", self.beta)

    def cdf(self, x):
        return beta_cdf(x, self.alpha, self.beta)

    def ppf(self, p):
        return beta_ppf(p, self.alpha, self.beta)


@dataclass(frozen=True)
class GammaParams:
    """Gamma shape ``alpha`` and *scale* ``beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        _check_positive("alpha", self.alpha)
        _check_positive("beta", self.beta)

    def cdf(self, x):
        return gamma_cdf(x, self.alpha, self.beta)

    def ppf(self, p):
        return gamma_ppf(p, self.alpha, self.beta)


@dataclass(frozen=True)
class ExpParams:
    rate: float

    def __post_init__(self):
        _check_positive("lambda", self.rate)

    def cdf(self, x):
        return exp_cdf(x, self.rate)

    def ppf(self, p):
        return exp_ppf(p, self.rate)


@dataclass(frozen=True)
class NormalParams:
    """Standard normal target; carries no free parameters."""

    def cdf(self, x):
        return normal_cdf(x)

    def ppf(self, p):
        return normal_ppf(p)
