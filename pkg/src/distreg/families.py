"""Response distributions, link functions, and likelihood derivatives.

Each family models a response through K parameters (location, scale, shape,
zero-probability), every one of which gets its own link function so that the
linear predictor lives on an unconstrained scale. Families expose density,
CDF, quantile, sampling, and the analytic first/second log-likelihood
derivatives on the predictor scale that the penalized Newton fitter consumes.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

__all__ = [
    "DomainError",
    "Link",
    "LINKS",
    "ParamInfo",
    "Family",
    "FAMILIES",
    "get_family",
    "loglik_derivs",
    "WEIGHT_FLOOR",
]

# Observed information on the predictor scale is clamped below at this value
# so working weights never vanish or flip sign at boundary observations.
WEIGHT_FLOOR = 1e-10

_LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """A value lies outside the domain of a parameter, link, or support."""


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Link:
    """Invertible map between a parameter domain and the real line.

    ``deriv``/``deriv2`` are dtheta/deta and d2theta/deta2 as functions of
    theta, which is what the chain rule in :func:`loglik_derivs` needs.
    """

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    deriv2: Callable[[np.ndarray], np.ndarray]

    def __call__(self, theta):
        return self.forward(theta)


def _identity_fwd(theta):
    return np.asarray(theta, dtype=float)


def _log_fwd(theta):
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0.0):
        raise DomainError("log link requires a strictly positive argument")
    return np.log(theta)


def _log_inv(eta):
    return np.exp(np.clip(eta, -700.0, 700.0))


def _logit_fwd(theta):
    theta = np.asarray(theta, dtype=float)
    if np.any((theta <= 0.0) | (theta >= 1.0)):
        raise DomainError("logit link requires an argument in (0, 1)")
    return np.log(theta) - np.log1p(-theta)


IDENTITY = Link(
    "identity",
    forward=_identity_fwd,
    inverse=_identity_fwd,
    deriv=lambda theta: np.ones_like(np.asarray(theta, dtype=float)),
    deriv2=lambda theta: np.zeros_like(np.asarray(theta, dtype=float)),
)

LOG = Link(
    "log",
    forward=_log_fwd,
    inverse=_log_inv,
    deriv=lambda theta: np.asarray(theta, dtype=float),
    deriv2=lambda theta: np.asarray(theta, dtype=float),
)

LOGIT = Link(
    "logit",
    forward=_logit_fwd,
    inverse=lambda eta: special.expit(eta),
    deriv=lambda theta: theta * (1.0 - theta),
    deriv2=lambda theta: theta * (1.0 - theta) * (1.0 - 2.0 * theta),
)

LINKS = {link.name: link for link in (IDENTITY, LOG, LOGIT)}


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamInfo:
    """Descriptor of one distribution parameter."""

    name: str
    domain: tuple[float, float]  # open interval
    link: Link


def _as_arrays(y, theta, k):
    y = np.asarray(y, dtype=float)
    theta = tuple(np.asarray(t, dtype=float) for t in theta)
    if len(theta) != k:
        raise DomainError(f"expected {k} parameters, got {len(theta)}")
    return y, theta


class Family(ABC):
    """A K-parameter response distribution.

    All methods are vectorized over observations: ``theta`` is a tuple of K
    arrays (or scalars) broadcasting against ``y``. Instances are stateless
    and safe for concurrent use.
    """

    name: str = "family"
    params: tuple[ParamInfo, ...] = ()
    support: str = "real"  # real | positive | nonnegative | count
    discrete: bool = False
    zero_atom: bool = False  # mixed distribution with point mass at zero

    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def links(self) -> tuple[Link, ...]:
        return tuple(p.link for p in self.params)

    def validate(self, theta: Sequence) -> tuple[np.ndarray, ...]:
        """Check domain membership of each parameter; return float arrays."""
        if len(theta) != self.n_params:
            raise DomainError(
                f"{self.name} takes {self.n_params} parameters, got {len(theta)}"
            )
        out = []
        for info, value in zip(self.params, theta):
            arr = np.asarray(value, dtype=float)
            lo, hi = info.domain
            if np.any(~np.isfinite(arr)) or np.any(arr <= lo) or np.any(arr >= hi):
                raise DomainError(
                    f"{self.name}.{info.name} outside open interval ({lo}, {hi})"
                )
            out.append(arr)
        return tuple(out)

    def check_support(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.support in ("count",):
            if np.any(y != np.floor(y)) or np.any(y < 0):
                raise DomainError(f"{self.name} requires nonnegative integer responses")
        elif self.support == "positive":
            if np.any(y <= 0):
                raise DomainError(f"{self.name} requires strictly positive responses")
        elif self.support == "nonnegative":
            if np.any(y < 0):
                raise DomainError(f"{self.name} requires nonnegative responses")
        return y

    # -- distribution functions ------------------------------------------

    @abstractmethod
    def logpdf(self, y, theta) -> np.ndarray:
        """Log density (or log mass) at in-support points; -inf outside."""

    def pdf(self, y, theta) -> np.ndarray:
        if self.support == "count":
            arr = np.asarray(y, dtype=float)
            if np.any(arr != np.floor(arr)):
                raise DomainError(f"{self.name} mass is defined on integers only")
        return np.exp(self.logpdf(y, theta))

    @abstractmethod
    def cdf(self, y, theta) -> np.ndarray:
        """P(Y <= y); right-continuous, with the zero atom included first."""

    @abstractmethod
    def quantile(self, p, theta) -> np.ndarray:
        """Generalized inverse CDF; p must lie strictly inside (0, 1)."""

    def sample(self, theta, rng: np.random.Generator) -> np.ndarray:
        """Inversion sampling; deterministic given the generator state."""
        theta = tuple(np.asarray(t, dtype=float) for t in theta)
        n = np.broadcast(*[np.atleast_1d(t) for t in theta]).shape[0]
        u = rng.random(n)
        u = np.clip(u, 1e-16, 1.0 - 1e-16)
        return self.quantile(u, theta)

    # -- likelihood derivatives ------------------------------------------

    @abstractmethod
    def score(self, y, theta) -> list[np.ndarray]:
        """First derivatives of the log density w.r.t. each raw parameter."""

    @abstractmethod
    def curvature(self, y, theta) -> list[np.ndarray]:
        """Second derivatives of the log density w.r.t. each raw parameter."""

    @abstractmethod
    def initial_params(self, y) -> tuple[float, ...]:
        """Cheap global moment-style estimates, strictly inside the domain."""

    # -- moments (closed forms; subclasses override what exists) ----------

    def mean(self, theta):
        raise NotImplementedError

    def variance(self, theta):
        raise NotImplementedError

    def _check_p(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0.0) | (p >= 1.0)):
            raise DomainError("quantile level must lie strictly inside (0, 1)")
        return p


def _clip_prob(p):
    return np.clip(p, 1e-300, 1.0)


class Normal(Family):
    """Gaussian with identity-linked mean and log-linked standard deviation."""

    name = "normal"
    params = (
        ParamInfo("mu", (-math.inf, math.inf), IDENTITY),
        ParamInfo("sigma", (0.0, math.inf), LOG),
    )
    support = "real"

    def logpdf(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        z = (y - mu) / sigma
        return -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * z * z

    def cdf(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        return special.ndtr((y - mu) / sigma)

    def quantile(self, p, theta):
        p = self._check_p(p)
        mu, sigma = (np.asarray(t, dtype=float) for t in theta)
        return mu + sigma * special.ndtri(p)

    def score(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        r = y - mu
        return [r / sigma**2, -1.0 / sigma + r * r / sigma**3]

    def curvature(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        r2 = (y - mu) ** 2
        return [
            -np.ones_like(y) / sigma**2,
            1.0 / sigma**2 - 3.0 * r2 / sigma**4,
        ]

    def initial_params(self, y):
        y = np.asarray(y, dtype=float)
        return float(np.mean(y)), max(float(np.std(y)), 1e-6)

    def mean(self, theta):
        return np.asarray(theta[0], dtype=float)

    def variance(self, theta):
        return np.asarray(theta[1], dtype=float) ** 2


class LogNormal(Family):
    """Exponentiated Gaussian: mu and sigma act on the log scale."""

    name = "lognormal"
    params = (
        ParamInfo("mu", (-math.inf, math.inf), IDENTITY),
        ParamInfo("sigma", (0.0, math.inf), LOG),
    )
    support = "positive"

    def logpdf(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        out = np.full(np.broadcast(y, mu, sigma).shape, -np.inf)
        ok = y > 0
        z = (np.log(np.where(ok, y, 1.0)) - mu) / sigma
        val = -np.log(np.where(ok, y, 1.0)) - np.log(sigma) - 0.5 * _LOG_2PI - 0.5 * z * z
        return np.where(ok, val, out)

    def cdf(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        ok = y > 0
        z = (np.log(np.where(ok, y, 1.0)) - mu) / sigma
        return np.where(ok, special.ndtr(z), 0.0)

    def quantile(self, p, theta):
        p = self._check_p(p)
        mu, sigma = (np.asarray(t, dtype=float) for t in theta)
        return np.exp(mu + sigma * special.ndtri(p))

    def score(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        r = np.log(y) - mu
        return [r / sigma**2, -1.0 / sigma + r * r / sigma**3]

    def curvature(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        r2 = (np.log(y) - mu) ** 2
        return [
            -np.ones_like(y) / sigma**2,
            1.0 / sigma**2 - 3.0 * r2 / sigma**4,
        ]

    def initial_params(self, y):
        ly = np.log(np.asarray(y, dtype=float))
        return float(np.mean(ly)), max(float(np.std(ly)), 1e-6)

    def mean(self, theta):
        mu, sigma = (np.asarray(t, dtype=float) for t in theta)
        return np.exp(mu + 0.5 * sigma**2)

    def variance(self, theta):
        mu, sigma = (np.asarray(t, dtype=float) for t in theta)
        return np.expm1(sigma**2) * np.exp(2.0 * mu + sigma**2)


def _gamma_shape_scale(mu, sigma):
    # mean/coefficient-of-variation parameterization: shape 1/sigma^2,
    # scale sigma^2 * mu, so E[Y] = mu and Var[Y] = sigma^2 mu^2.
    alpha = 1.0 / sigma**2
    scale = sigma**2 * mu
    return alpha, scale


class Gamma(Family):
    """Gamma with log-linked mean ``mu`` and coefficient of variation ``sigma``."""

    name = "gamma"
    params = (
        ParamInfo("mu", (0.0, math.inf), LOG),
        ParamInfo("sigma", (0.0, math.inf), LOG),
    )
    support = "positive"

    def logpdf(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        alpha, scale = _gamma_shape_scale(mu, sigma)
        ok = y > 0
        ys = np.where(ok, y, 1.0)
        val = (
            (alpha - 1.0) * np.log(ys)
            - ys / scale
            - special.gammaln(alpha)
            - alpha * np.log(scale)
        )
        return np.where(ok, val, -np.inf)

    def cdf(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        alpha, scale = _gamma_shape_scale(mu, sigma)
        return np.where(y > 0, special.gammainc(alpha, np.maximum(y, 0.0) / scale), 0.0)

    def quantile(self, p, theta):
        p = self._check_p(p)
        mu, sigma = (np.asarray(t, dtype=float) for t in theta)
        alpha, scale = _gamma_shape_scale(mu, sigma)
        return special.gammaincinv(alpha, p) * scale

    def score(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        alpha = 1.0 / sigma**2
        du = (y - mu) / (sigma**2 * mu**2)
        c = self._sigma_term(y, mu, sigma, alpha)
        ds = 2.0 * c / sigma**3
        return [du, ds]

    def curvature(self, y, theta):
        y, (mu, sigma) = _as_arrays(y, theta, 2)
        alpha = 1.0 / sigma**2
        d2u = (mu - 2.0 * y) / (sigma**2 * mu**3)
        c = self._sigma_term(y, mu, sigma, alpha)
        d2s = (-6.0 * c + 4.0) / sigma**4 - 4.0 * special.polygamma(1, alpha) / sigma**6
        return [d2u, d2s]

    @staticmethod
    def _sigma_term(y, mu, sigma, alpha):
        return (
            -np.log(y)
            + y / mu
            + special.digamma(alpha)
            + 2.0 * np.log(sigma)
            + np.log(mu)
            - 1.0
        )

    def initial_params(self, y):
        y = np.asarray(y, dtype=float)
        m = float(np.mean(y))
        cv = float(np.std(y) / m) if m > 0 else 1.0
        return max(m, 1e-8), min(max(cv, 1e-3), 10.0)

    def mean(self, theta):
        return np.asarray(theta[0], dtype=float)

    def variance(self, theta):
        mu, sigma = (np.asarray(t, dtype=float) for t in theta)
        return sigma**2 * mu**2


class SinghMaddala(Family):
    """Burr power-tail distribution for right-skewed, fat-tailed outcomes.

    Parameterized as F(y) = 1 - [1 + (y/mu)^sigma]^(-tau): ``mu`` is the
    scale, ``sigma`` and ``tau`` are shapes, all log-linked. The r-th moment
    exists iff sigma * tau > r.
    """

    name = "singh-maddala"
    params = (
        ParamInfo("mu", (0.0, math.inf), LOG),
        ParamInfo("sigma", (0.0, math.inf), LOG),
        ParamInfo("tau", (0.0, math.inf), LOG),
    )
    support = "positive"

    def logpdf(self, y, theta):
        y, (b, a, q) = _as_arrays(y, theta, 3)
        ok = y > 0
        ys = np.where(ok, y, 1.0)
        m = np.log(ys / b)
        val = (
            np.log(a)
            + np.log(q)
            + (a - 1.0) * np.log(ys)
            - a * np.log(b)
            - (q + 1.0) * np.logaddexp(0.0, a * m)
        )
        return np.where(ok, val, -np.inf)

    def cdf(self, y, theta):
        y, (b, a, q) = _as_arrays(y, theta, 3)
        ok = y > 0
        m = np.log(np.where(ok, y, 1.0) / b)
        log_sf = -q * np.logaddexp(0.0, a * m)
        return np.where(ok, -np.expm1(log_sf), 0.0)

    def quantile(self, p, theta):
        p = self._check_p(p)
        b, a, q = (np.asarray(t, dtype=float) for t in theta)
        # y = b * [ (1-p)^(-1/q) - 1 ]^(1/a), computed in logs for stability
        inner = np.expm1(-np.log1p(-p) / q)
        return b * np.exp(np.log(inner) / a)

    def score(self, y, theta):
        y, (b, a, q) = _as_arrays(y, theta, 3)
        m = np.log(y / b)
        u = special.expit(a * m)  # t / (1 + t) with t = (y/b)^a
        big_l = np.logaddexp(0.0, a * m)  # log(1 + t)
        db = (a / b) * ((q + 1.0) * u - 1.0)
        da = 1.0 / a + m * (1.0 - (q + 1.0) * u)
        dq = 1.0 / q - big_l
        return [db, da, dq]

    def curvature(self, y, theta):
        y, (b, a, q) = _as_arrays(y, theta, 3)
        m = np.log(y / b)
        u = special.expit(a * m)
        uu = u * (1.0 - u)  # t / (1 + t)^2
        d2b = -(a / b**2) * ((q + 1.0) * u - 1.0) - (a**2 / b**2) * (q + 1.0) * uu
        d2a = -1.0 / a**2 - (q + 1.0) * m * m * uu
        d2q = -np.ones_like(y) / q**2
        return [d2b, d2a, d2q]

    def initial_params(self, y):
        y = np.asarray(y, dtype=float)
        med = float(np.median(y))
        # a = 2, q = 1 keeps the mean finite (aq = 2) and makes the median
        # equal the scale: med = b * (2^{1/q} - 1)^{1/a} = b.
        return max(med, 1e-8), 2.0, 1.0

    def _raw_moment(self, r, theta):
        b, a, q = (np.asarray(t, dtype=float) for t in theta)
        if np.any(a * q <= r):
            raise DomainError(
                f"{self.name}: moment of order {r} requires sigma*tau > {r}"
            )
        lg = special.gammaln
        return b**r * np.exp(lg(1.0 + r / a) + lg(q - r / a) - lg(q))

    def mean(self, theta):
        return self._raw_moment(1.0, theta)

    def variance(self, theta):
        return self._raw_moment(2.0, theta) - self.mean(theta) ** 2


class ZeroAdjustedGamma(Family):
    """Mixed distribution: point mass ``nu`` at zero, gamma above zero."""

    name = "zero-adjusted-gamma"
    params = (
        ParamInfo("mu", (0.0, math.inf), LOG),
        ParamInfo("sigma", (0.0, math.inf), LOG),
        ParamInfo("nu", (0.0, 1.0), LOGIT),
    )
    support = "nonnegative"
    zero_atom = True
    _gamma = Gamma()

    def logpdf(self, y, theta):
        y, (mu, sigma, nu) = _as_arrays(y, theta, 3)
        pos = self._gamma.logpdf(np.where(y > 0, y, 1.0), (mu, sigma)) + np.log1p(-nu)
        return np.where(y == 0, np.log(nu), np.where(y > 0, pos, -np.inf))

    def cdf(self, y, theta):
        y, (mu, sigma, nu) = _as_arrays(y, theta, 3)
        cont = self._gamma.cdf(np.maximum(y, 0.0), (mu, sigma))
        return np.where(y >= 0, nu + (1.0 - nu) * cont, 0.0)

    def quantile(self, p, theta):
        p = self._check_p(p)
        mu, sigma, nu = (np.asarray(t, dtype=float) for t in theta)
        adj = np.clip((p - nu) / (1.0 - nu), 1e-16, 1.0 - 1e-16)
        cont = self._gamma.quantile(adj, (mu, sigma))
        return np.where(p <= nu, 0.0, cont)

    def score(self, y, theta):
        y, (mu, sigma, nu) = _as_arrays(y, theta, 3)
        zero = y == 0
        ys = np.where(zero, 1.0, y)
        g_mu, g_sigma = self._gamma.score(ys, (mu, sigma))
        d_mu = np.where(zero, 0.0, g_mu)
        d_sigma = np.where(zero, 0.0, g_sigma)
        d_nu = np.where(zero, 1.0 / nu, -1.0 / (1.0 - nu))
        return [d_mu, d_sigma, d_nu]

    def curvature(self, y, theta):
        y, (mu, sigma, nu) = _as_arrays(y, theta, 3)
        zero = y == 0
        ys = np.where(zero, 1.0, y)
        g_mu, g_sigma = self._gamma.curvature(ys, (mu, sigma))
        d_mu = np.where(zero, 0.0, g_mu)
        d_sigma = np.where(zero, 0.0, g_sigma)
        d_nu = np.where(zero, -1.0 / nu**2, -1.0 / (1.0 - nu) ** 2)
        return [d_mu, d_sigma, d_nu]

    def initial_params(self, y):
        y = np.asarray(y, dtype=float)
        frac0 = float(np.mean(y == 0))
        pos = y[y > 0]
        mu, sigma = self._gamma.initial_params(pos if pos.size else np.ones(1))
        return mu, sigma, min(max(frac0, 1e-3), 1.0 - 1e-3)

    def mean(self, theta):
        mu, sigma, nu = (np.asarray(t, dtype=float) for t in theta)
        return (1.0 - nu) * mu

    def variance(self, theta):
        mu, sigma, nu = (np.asarray(t, dtype=float) for t in theta)
        return (1.0 - nu) * mu**2 * (sigma**2 + nu)


class Poisson(Family):
    """Poisson counts with log-linked mean."""

    name = "poisson"
    params = (ParamInfo("mu", (0.0, math.inf), LOG),)
    support = "count"
    discrete = True

    def logpdf(self, y, theta):
        y, (mu,) = _as_arrays(y, theta, 1)
        ok = (y >= 0) & (y == np.floor(y))
        ys = np.where(ok, y, 0.0)
        val = ys * np.log(mu) - mu - special.gammaln(ys + 1.0)
        return np.where(ok, val, -np.inf)

    def cdf(self, y, theta):
        y, (mu,) = _as_arrays(y, theta, 1)
        k = np.floor(y)
        return np.where(y < 0, 0.0, special.pdtr(np.maximum(k, 0.0), mu))

    def quantile(self, p, theta):
        p = self._check_p(p)
        (mu,) = (np.asarray(t, dtype=float) for t in theta)
        return stats.poisson.ppf(p, mu)

    def score(self, y, theta):
        y, (mu,) = _as_arrays(y, theta, 1)
        return [y / mu - 1.0]

    def curvature(self, y, theta):
        y, (mu,) = _as_arrays(y, theta, 1)
        return [-y / mu**2]

    def initial_params(self, y):
        return (max(float(np.mean(np.asarray(y, dtype=float))), 1e-6),)

    def mean(self, theta):
        return np.asarray(theta[0], dtype=float)

    def variance(self, theta):
        return np.asarray(theta[0], dtype=float)


class ZeroInflatedPoisson(Family):
    """Poisson mixed with a logit-linked extra probability ``sigma`` of zero."""

    name = "zero-inflated-poisson"
    params = (
        ParamInfo("mu", (0.0, math.inf), LOG),
        ParamInfo("sigma", (0.0, 1.0), LOGIT),
    )
    support = "count"
    discrete = True

    def logpdf(self, y, theta):
        y, (mu, pi) = _as_arrays(y, theta, 2)
        ok = (y >= 0) & (y == np.floor(y))
        ys = np.where(ok, y, 0.0)
        p0 = pi + (1.0 - pi) * np.exp(-mu)
        pos = np.log1p(-pi) + ys * np.log(mu) - mu - special.gammaln(ys + 1.0)
        val = np.where(ys == 0, np.log(p0), pos)
        return np.where(ok, val, -np.inf)

    def cdf(self, y, theta):
        y, (mu, pi) = _as_arrays(y, theta, 2)
        k = np.maximum(np.floor(y), 0.0)
        base = special.pdtr(k, mu)
        return np.where(y < 0, 0.0, pi + (1.0 - pi) * base)

    def quantile(self, p, theta):
        p = self._check_p(p)
        mu, pi = (np.asarray(t, dtype=float) for t in theta)
        adj = np.clip((p - pi) / (1.0 - pi), 1e-16, 1.0 - 1e-16)
        cont = stats.poisson.ppf(adj, mu)
        return np.where(p <= pi + (1.0 - pi) * np.exp(-mu), 0.0, cont)

    def score(self, y, theta):
        y, (mu, pi) = _as_arrays(y, theta, 2)
        zero = y == 0
        e = np.exp(-mu)
        p0 = pi + (1.0 - pi) * e
        a = (1.0 - pi) * e
        d_mu = np.where(zero, -a / p0, y / mu - 1.0)
        d_pi = np.where(zero, (1.0 - e) / p0, -1.0 / (1.0 - pi))
        return [d_mu, d_pi]

    def curvature(self, y, theta):
        y, (mu, pi) = _as_arrays(y, theta, 2)
        zero = y == 0
        e = np.exp(-mu)
        p0 = pi + (1.0 - pi) * e
        a = (1.0 - pi) * e
        d2_mu = np.where(zero, a * pi / p0**2, -y / mu**2)
        d2_pi = np.where(zero, -((1.0 - e) / p0) ** 2, -1.0 / (1.0 - pi) ** 2)
        return [d2_mu, d2_pi]

    def initial_params(self, y):
        y = np.asarray(y, dtype=float)
        frac0 = float(np.mean(y == 0))
        pi0 = min(max(0.5 * frac0, 1e-3), 1.0 - 1e-3)
        mu0 = max(float(np.mean(y)) / (1.0 - pi0), 1e-6)
        return mu0, pi0

    def mean(self, theta):
        mu, pi = (np.asarray(t, dtype=float) for t in theta)
        return (1.0 - pi) * mu

    def variance(self, theta):
        mu, pi = (np.asarray(t, dtype=float) for t in theta)
        return (1.0 - pi) * mu * (1.0 + pi * mu)


FAMILIES: dict[str, Family] = {
    fam.name: fam
    for fam in (
        Normal(),
        LogNormal(),
        Gamma(),
        SinghMaddala(),
        ZeroAdjustedGamma(),
        Poisson(),
        ZeroInflatedPoisson(),
    )
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise KeyError(
            f"unknown family '{name}'; available: {sorted(FAMILIES)}"
        ) from None


def loglik_derivs(family: Family, y, theta, links: Sequence[Link] | None = None):
    """First and (negated) second log-likelihood derivatives per predictor.

    Returns ``(U, W)`` where ``U[k] = d log p / d eta_k`` and
    ``W[k] = -d2 log p / d eta_k^2`` (observed information on the predictor
    scale), chain-ruled through each parameter's link. ``W`` is clamped below
    at :data:`WEIGHT_FLOOR`; non-finite entries (boundary observations) are
    replaced by zero score and floor weight so the fitter's step-halving can
    take over.
    """
    links = tuple(links) if links is not None else family.links
    theta = tuple(np.asarray(t, dtype=float) for t in theta)
    scores = family.score(y, theta)
    curvs = family.curvature(y, theta)
    U, W = [], []
    for k, link in enumerate(links):
        d1 = link.deriv(theta[k])
        d2 = link.deriv2(theta[k])
        u = scores[k] * d1
        w = -(curvs[k] * d1 * d1 + scores[k] * d2)
        u = np.where(np.isfinite(u), u, 0.0)
        w = np.where(np.isfinite(w), w, WEIGHT_FLOOR)
        U.append(np.asarray(u, dtype=float))
        W.append(np.maximum(w, WEIGHT_FLOOR))
    return U, W
