"""One-parameter exponential families used as entry models.

Each family is described by its log-partition ``b(theta)``; the mean link is
``f = b'`` and the variance function is ``b''``.  All functions accept
scalars or numpy arrays and broadcast like ufuncs.
"""
from __future__ import annotations

import enum
import math

import numpy as np
from scipy.special import expit, gammaln

from .exceptions import DomainError, NumericalError

POISSON_MAX_THETA = 700.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Family(str, enum.Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"
    POISSON = "poisson"

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise DomainError(f"unknown family {name!r}; expected one of "
                              f"{[f.value for f in cls]}") from None


def _check_theta(family: Family, theta):
    theta = np.asarray(theta, dtype=float)
    if family is Family.POISSON and np.any(theta > POISSON_MAX_THETA):
        raise NumericalError(
            f"Poisson natural parameter exceeds {POISSON_MAX_THETA:g}")
    return theta


def _out(value):
    return float(value) if np.ndim(value) == 0 else value


def log_partition(family, theta):
    """Cumulant function ``b(theta)``."""
    family = Family.parse(family)
    theta = _check_theta(family, theta)
    if family is Family.BERNOULLI:
        out = np.maximum(theta, 0.0) + np.log1p(np.exp(-np.abs(theta)))
    elif family is Family.GAUSSIAN:
        out = 0.5 * theta * theta
    else:
        out = np.exp(theta)
    return _out(out)


def mean_link(family, theta):
    """Expected value ``f(theta) = b'(theta)``."""
    family = Family.parse(family)
    theta = _check_theta(family, theta)
    if family is Family.BERNOULLI:
        out = expit(theta)
    elif family is Family.GAUSSIAN:
        out = theta.copy() if theta.ndim else theta
    else:
        out = np.exp(theta)
    return _out(out)


def link_derivative(family, theta):
    """Variance function ``b''(theta)``; never negative."""
    family = Family.parse(family)
    theta = _check_theta(family, theta)
    if family is Family.BERNOULLI:
        # expit(t) * expit(-t) keeps full relative precision in both tails
        out = expit(theta) * expit(-theta)
    elif family is Family.GAUSSIAN:
        out = np.ones_like(theta)
    else:
        out = np.exp(theta)
    return _out(out)


def admissible(family, x) -> np.ndarray:
    """Boolean mask of values inside the family's support."""
    family = Family.parse(family)
    x = np.asarray(x, dtype=float)
    finite = np.isfinite(x)
    if family is Family.BERNOULLI:
        return finite & ((x == 0.0) | (x == 1.0))
    if family is Family.GAUSSIAN:
        return finite
    with np.errstate(invalid="ignore"):
        return finite & (x >= 0.0) & (np.floor(x) == x)


def log_base_measure(family, x):
    """``log h(x)`` for admissible ``x``."""
    family = Family.parse(family)
    x = np.asarray(x, dtype=float)
    if family is Family.BERNOULLI:
        out = np.zeros_like(x)
    elif family is Family.GAUSSIAN:
        out = -_HALF_LOG_2PI - 0.5 * x * x
    else:
        out = -gammaln(x + 1.0)
    return _out(out)


def log_density(family, x, theta):
    """Fully normalised ``log p(x | theta) = theta*x - b(theta) + log h(x)``.

    Raises
    ------
    DomainError
        If any ``x`` is outside the family's support.
    """
    family = Family.parse(family)
    x_arr = np.asarray(x, dtype=float)
    if not np.all(admissible(family, x_arr)):
        raise DomainError(f"value outside the support of the {family.value} family")
    theta = _check_theta(family, theta)
    if family is Family.GAUSSIAN:
        # same quantity, arranged to avoid cancellation for large |x|, |theta|
        out = -0.5 * (x_arr - theta) ** 2 - _HALF_LOG_2PI
    else:
        out = theta * x_arr - np.asarray(log_partition(family, theta)) \
            + np.asarray(log_base_measure(family, x_arr))
    return _out(out)
