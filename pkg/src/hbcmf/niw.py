"""Normal-Inverse-Wishart hyperprior over a factor's Gaussian row prior.

Convention: ``Sigma ~ IW(nu, Psi)`` (equivalently ``Sigma^{-1} ~ W(nu, Psi^{-1})``)
and ``mu | Sigma ~ N(xi, Sigma / beta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import multigammaln

from .linalg import cholesky


@dataclass(frozen=True, eq=False)
class NiwHyperprior:
    nu: float
    psi: np.ndarray
    xi: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "psi", np.atleast_2d(np.asarray(self.psi, float)))
        object.__setattr__(self, "xi", np.asarray(self.xi, float).reshape(-1))
        k = self.xi.shape[0]
        if self.psi.shape != (k, k):
            raise ValueError("psi must be k x k")
        if self.nu < k:
            raise ValueError(f"nu must be >= k ({k}), got {self.nu}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @classmethod
    def default(cls, k: int) -> "NiwHyperprior":
        """``nu = k``, ``Psi = I``, ``xi = 0``, ``beta = 1``."""
        return cls(float(k), np.eye(k), np.zeros(k), 1.0)

    @property
    def k(self):
        return self.xi.shape[0]


@dataclass(frozen=True, eq=False)
class NiwPosterior:
    nu_star: float
    psi_star: np.ndarray
    xi_star: np.ndarray
    beta_star: float

    @property
    def k(self):
        return self.xi_star.shape[0]


def niw_posterior(prior: NiwHyperprior, rows) -> NiwPosterior:
    """Conjugate update of the hyperprior given factor rows ``(n, k)``."""
    rows = np.asarray(rows, float).reshape(-1, prior.k)
    n = rows.shape[0]
    if n == 0:
        return NiwPosterior(prior.nu, prior.psi.copy(), prior.xi.copy(), prior.beta)
    mean = rows.mean(axis=0)
    centered = rows - mean
    scatter = centered.T @ centered
    shrink = prior.beta * n / (prior.beta + n)
    diff = mean - prior.xi
    psi_star = prior.psi + scatter + shrink * np.outer(diff, diff)
    xi_star = (n * mean + prior.beta * prior.xi) / (prior.beta + n)
    return NiwPosterior(prior.nu + n, 0.5 * (psi_star + psi_star.T), xi_star, prior.beta + n)


def niw_mode(post: NiwPosterior):
    """Joint mode ``(xi*, Psi* / (nu* + k + 2))``."""
    return post.xi_star.copy(), post.psi_star / (post.nu_star + post.k + 2.0)


def niw_logpdf(mu, sigma, prior: NiwHyperprior) -> float:
    """``log IW(Sigma | nu, Psi) + log N(mu | xi, Sigma / beta)``."""
    k = prior.k
    nu = prior.nu
    chol_s = cholesky(sigma)
    logdet_s = 2.0 * float(np.log(np.diag(chol_s)).sum())
    logdet_psi = 2.0 * float(np.log(np.diag(cholesky(prior.psi))).sum())
    # tr(Psi Sigma^{-1}) = ||L^{-1} C_psi||_F^2 with Sigma = L L^T
    a = solve_triangular(chol_s, cholesky(prior.psi), lower=True)
    trace = float(np.sum(a * a))
    log_iw = (0.5 * nu * logdet_psi - 0.5 * nu * k * math.log(2.0)
              - multigammaln(0.5 * nu, k) - 0.5 * (nu + k + 1.0) * logdet_s - 0.5 * trace)
    z = solve_triangular(chol_s, np.asarray(mu, float) - prior.xi, lower=True)
    log_n = (-0.5 * k * math.log(2.0 * math.pi) - 0.5 * (logdet_s - k * math.log(prior.beta))
             - 0.5 * prior.beta * float(z @ z))
    return log_iw + log_n


def _bartlett(nu, k, rng, size):
    """Lower-triangular Bartlett factors ``A`` with ``A A^T ~ W(nu, I)``."""
    shape = () if size is None else (size,)
    a = np.zeros(shape + (k, k))
    dfs = nu - np.arange(k)
    diag = np.sqrt(rng.chisquare(dfs, size=shape + (k,)))
    lower = np.tril_indices(k, -1)
    a[(...,) + lower] = rng.standard_normal(shape + (len(lower[0]),))
    idx = np.arange(k)
    a[..., idx, idx] = diag
    return a


def sample_wishart(nu, scale, rng, size=None):
    """Draw from ``W(nu, scale)`` by Bartlett decomposition.

    Returns a ``(k, k)`` matrix, or ``(size, k, k)`` when ``size`` is given.
    """
    scale = np.atleast_2d(np.asarray(scale, float))
    k = scale.shape[0]
    if nu < k:
        raise ValueError(f"nu must be >= k ({k})")
    c = cholesky(scale)
    ca = c @ _bartlett(nu, k, rng, size)
    w = ca @ np.swapaxes(ca, -1, -2)
    return 0.5 * (w + np.swapaxes(w, -1, -2))


def sample_niw(post: NiwPosterior, rng, size=None):
    """Draw ``(mu, Sigma)``: ``Sigma^{-1} ~ W(nu*, Psi*^{-1})``, ``mu ~ N(xi*, Sigma/beta*)``.

    The Wishart draw is ``C^{-T} A A^T C^{-1}`` with ``Psi* = C C^T``, so
    ``Sigma = B B^T`` with ``B = C A^{-T}``; no matrix is ever inverted.
    """
    k = post.k
    c = cholesky(post.psi_star)
    a = _bartlett(post.nu_star, k, rng, size)
    z = rng.standard_normal((k,) if size is None else (size, k))
    if size is None:
        b = solve_triangular(a, c.T, lower=True).T
        sigma = b @ b.T
        mu = post.xi_star + b @ z / math.sqrt(post.beta_star)
    else:
        bt = np.linalg.solve(a, np.broadcast_to(c.T, (size, k, k)))
        b = np.swapaxes(bt, -1, -2)
        sigma = b @ bt
        mu = post.xi_star + np.einsum("sij,sj->si", b, z) / math.sqrt(post.beta_star)
    return mu, 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
