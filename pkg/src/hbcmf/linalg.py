"""Small dense linear-algebra helpers for stacks of k x k SPD matrices."""
from __future__ import annotations

import math

import numpy as np

from .exceptions import NumericalError

_JITTER_TRIES = 3


def cholesky(h: np.ndarray, row=None) -> np.ndarray:
    """Lower Cholesky factor of one SPD matrix, with escalating jitter.

    On failure adds ``1e-8 * tr(h)/k * I``, growing tenfold, at most three
    times before raising :class:`NumericalError`.
    """
    try:
        return np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        pass
    k = h.shape[-1]
    base = 1e-8 * max(abs(np.trace(h)) / k, np.finfo(float).tiny)
    eye = np.eye(k)
    for i in range(_JITTER_TRIES):
        try:
            return np.linalg.cholesky(h + base * 10.0**i * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("Cholesky factorization failed after jitter", row=row)


def cholesky_batch(h: np.ndarray, rows=None) -> np.ndarray:
    """Cholesky factors of a stack ``(n, k, k)``; falls back row by row."""
    if not np.all(np.isfinite(h)):
        bad = int(np.flatnonzero(~np.isfinite(h).all(axis=(1, 2)))[0])
        raise NumericalError("non-finite Hessian", row=bad if rows is None else rows[bad])
    try:
        return np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(h)
    for i in range(h.shape[0]):
        out[i] = cholesky(h[i], row=i if rows is None else rows[i])
    return out


def solve_lower(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L x = b`` for stacked lower-triangular ``L`` ``(n, k, k)``, ``b`` ``(n, k)``."""
    k = chol.shape[-1]
    x = np.empty_like(b, dtype=float)
    for i in range(k):
        acc = b[:, i] - np.einsum("nj,nj->n", chol[:, i, :i], x[:, :i])
        x[:, i] = acc / chol[:, i, i]
    return x


def solve_lower_t(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L^T x = b`` for stacked lower-triangular ``L``."""
    k = chol.shape[-1]
    x = np.empty_like(b, dtype=float)
    for i in range(k - 1, -1, -1):
        acc = b[:, i] - np.einsum("nj,nj->n", chol[:, i + 1:, i], x[:, i + 1:])
        x[:, i] = acc / chol[:, i, i]
    return x


def cho_solve_batch(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = b`` row-wise."""
    return solve_lower_t(chol, solve_lower(chol, b))


def gaussian_logpdf_prec(x: np.ndarray, mean: np.ndarray, chol_prec: np.ndarray) -> np.ndarray:
    """Row-wise ``log N(x | mean, H^{-1})`` given lower Cholesky factors of ``H``."""
    k = x.shape[-1]
    diff = x - mean
    w = np.einsum("nji,nj->ni", chol_prec, diff)  # L^T diff
    logdet = np.log(np.diagonal(chol_prec, axis1=-2, axis2=-1)).sum(axis=-1)
    return -0.5 * k * math.log(2.0 * math.pi) + logdet - 0.5 * np.einsum("ni,ni->n", w, w)


def spd_inverse(sigma: np.ndarray) -> np.ndarray:
    """Inverse of a small SPD matrix through its Cholesky factor."""
    chol = cholesky(sigma)
    k = sigma.shape[0]
    cols = cho_solve_batch(np.broadcast_to(chol, (k, k, k)), np.eye(k))
    return 0.5 * (cols + cols.T)
