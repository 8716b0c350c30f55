"""Per-row conditional negative log-posterior, gradient and Hessian.

With every factor but one frozen, each row ``u`` of the free factor is the
coefficient vector of a Bayesian GLM::

    L(u) = sum_blocks sum_j [b(u.v_j) - x_j u.v_j]
           + 1/2 (u - mu)^T P (u - mu) + 1/2 log det(2 pi P^{-1})

where ``P`` is the prior precision.  ``L`` is convex, so its Hessian is
positive-definite and both the MAP Newton step and the Metropolis-Hastings
proposal are built from it.

Two representations are provided: :class:`RowContext` for a single row with
its observations stored densely (``n_obs x k`` counterpart rows), and
:class:`FactorContext`, which evaluates every row of a factor at once from
masked dense relation matrices.  They compute the same quantities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import expfam
from .exceptions import NumericalError
from .expfam import POISSON_MAX_THETA, Family
from .linalg import cho_solve_batch, cholesky, cholesky_batch, spd_inverse

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ObservationBlock:
    counterparts: np.ndarray  # (n_obs, k)
    values: np.ndarray  # (n_obs,)
    family: Family

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "counterparts", np.atleast_2d(np.asarray(self.counterparts, float)))
        object.__setattr__(self, "values", np.asarray(self.values, float).reshape(-1))


@dataclass(frozen=True, eq=False)
class RowContext:
    prior_mean: np.ndarray
    prior_precision: np.ndarray
    blocks: tuple = ()
    row: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "prior_mean", np.asarray(self.prior_mean, float).reshape(-1))
        object.__setattr__(self, "prior_precision", np.atleast_2d(np.asarray(self.prior_precision, float)))
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def k(self):
        return self.prior_mean.shape[0]

    def prior_normalizer(self) -> float:
        """``1/2 log det(2 pi Sigma)`` with ``Sigma`` the prior covariance."""
        chol = cholesky(self.prior_precision, row=self.row)
        return 0.5 * (self.k * _LOG_2PI) - float(np.log(np.diag(chol)).sum())


def row_negloglik(ctx: RowContext, u) -> float:
    u = np.asarray(u, float)
    total = 0.0
    for blk in ctx.blocks:
        theta = blk.counterparts @ u
        total += float(np.sum(expfam.log_partition(blk.family, theta) - blk.values * theta))
    d = u - ctx.prior_mean
    return total + 0.5 * float(d @ ctx.prior_precision @ d) + ctx.prior_normalizer()


def row_gradient(ctx: RowContext, u) -> np.ndarray:
    u = np.asarray(u, float)
    g = ctx.prior_precision @ (u - ctx.prior_mean)
    for blk in ctx.blocks:
        theta = blk.counterparts @ u
        g = g + (np.asarray(expfam.mean_link(blk.family, theta)) - blk.values) @ blk.counterparts
    return g


def row_hessian(ctx: RowContext, u) -> np.ndarray:
    u = np.asarray(u, float)
    h = ctx.prior_precision.copy()
    for blk in ctx.blocks:
        w = np.asarray(expfam.link_derivative(blk.family, blk.counterparts @ u))
        h += (blk.counterparts * w[:, None]).T @ blk.counterparts
    return 0.5 * (h + h.T)


def newton_step(ctx: RowContext, u, step_length=1.0):
    """One (possibly fractional) Newton step; returns ``(u_new, hessian)``."""
    if not 0.0 <= step_length <= 1.0:
        raise ValueError(f"step_length must lie in [0, 1], got {step_length}")
    u = np.asarray(u, float)
    h = row_hessian(ctx, u)
    chol = cholesky(h, row=ctx.row)
    d = cho_solve((chol, True), row_gradient(ctx, u))
    return u - step_length * d, h


# -- batched evaluation over all rows of one factor ---------------------------

@dataclass(frozen=True, eq=False)
class DenseBlock:
    """One relation seen from the free factor: masked ``(n, m)`` values."""

    counterparts: np.ndarray  # (m, k)
    values: np.ndarray  # (n, m)
    mask: np.ndarray  # (n, m) bool
    family: Family

    def __post_init__(self):
        v = self.counterparts
        outer = np.einsum("mi,mj->mij", v, v).reshape(v.shape[0], -1)
        object.__setattr__(self, "_outer", outer)

    def take(self, rows):
        return DenseBlock(self.counterparts, self.values[rows], self.mask[rows], self.family)


class FactorContext:
    """Conditional GLMs of every row in one factor, evaluated together."""

    def __init__(self, prior_mean, prior_precision, blocks, row_ids=None):
        self.prior_mean = np.asarray(prior_mean, float)
        self.prior_precision = np.asarray(prior_precision, float)
        self.blocks = tuple(blocks)
        n = self.blocks[0].values.shape[0] if self.blocks else 0
        self.row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
        chol = cholesky(self.prior_precision)
        self._normalizer = 0.5 * self.k * _LOG_2PI - float(np.log(np.diag(chol)).sum())

    @property
    def k(self):
        return self.prior_mean.shape[0]

    @property
    def n(self):
        return len(self.row_ids)

    def take(self, rows) -> "FactorContext":
        rows = np.asarray(rows)
        return FactorContext(self.prior_mean, self.prior_precision,
                             [b.take(rows) for b in self.blocks], self.row_ids[rows])

    def row_context(self, i: int) -> RowContext:
        blocks = [ObservationBlock(b.counterparts[b.mask[i]], b.values[i, b.mask[i]], b.family)
                  for b in self.blocks]
        return RowContext(self.prior_mean, self.prior_precision, blocks, row=int(self.row_ids[i]))

    def _theta(self, blk, u, strict):
        theta = np.where(blk.mask, u @ blk.counterparts.T, 0.0)
        over = None
        if blk.family is Family.POISSON:
            hit = theta > POISSON_MAX_THETA
            if hit.any():
                over = hit.any(axis=1)
                if strict:
                    raise NumericalError("Poisson natural parameter overflow",
                                         row=int(self.row_ids[np.flatnonzero(over)[0]]))
                theta = np.minimum(theta, POISSON_MAX_THETA)
        return theta, over

    def negloglik(self, u, strict=True) -> np.ndarray:
        """Per-row ``L``; with ``strict=False`` overflowing rows get ``inf``."""
        d = u - self.prior_mean
        out = 0.5 * np.einsum("ni,ij,nj->n", d, self.prior_precision, d) + self._normalizer
        for blk in self.blocks:
            theta, over = self._theta(blk, u, strict)
            terms = np.asarray(expfam.log_partition(blk.family, theta)) - blk.values * theta
            out = out + np.where(blk.mask, terms, 0.0).sum(axis=1)
            if over is not None:
                out = np.where(over, np.inf, out)
        return out

    def gradient_hessian(self, u, strict=True):
        d = u - self.prior_mean
        g = d @ self.prior_precision
        h = np.zeros((u.shape[0], self.k * self.k))
        for blk in self.blocks:
            theta, _ = self._theta(blk, u, strict)
            resid = np.where(blk.mask, np.asarray(expfam.mean_link(blk.family, theta)) - blk.values, 0.0)
            w = np.where(blk.mask, np.asarray(expfam.link_derivative(blk.family, theta)), 0.0)
            g = g + resid @ blk.counterparts
            h += w @ blk._outer
        h = h.reshape(-1, self.k, self.k) + self.prior_precision
        return g, h

    def gradient(self, u, strict=True):
        return self.gradient_hessian(u, strict)[0]

    def hessian(self, u, strict=True):
        return self.gradient_hessian(u, strict)[1]

    def newton(self, u, step, strict=True):
        """Batched Newton step of per-row length ``step``; returns ``(u_new, H, chol(H))``."""
        g, h = self.gradient_hessian(u, strict)
        chol = cholesky_batch(h, rows=self.row_ids)
        direction = cho_solve_batch(chol, g)
        return u - np.asarray(step, float).reshape(-1, 1) * direction, h, chol


class DenseData:
    """Dense masked copies of every relation, used to build factor contexts."""

    def __init__(self, schema):
        self.schema = schema
        self.relations = tuple(schema.relations)
        self.dense = {rel.id: schema.dense(rel.id) for rel in self.relations}

    def factor_context(self, state, pos: int, precision=None) -> FactorContext:
        type_id = pos + 1
        blocks = []
        for rel in self.relations:
            values, mask = self.dense[rel.id]
            if rel.row_type == type_id:
                blocks.append(DenseBlock(state.factors[rel.col_type - 1], values, mask, rel.family))
            elif rel.col_type == type_id:
                blocks.append(DenseBlock(state.factors[rel.row_type - 1], values.T, mask.T, rel.family))
        if precision is None:
            precision = spd_inverse(state.covs[pos])
        if not blocks:
            n = state.factors[pos].shape[0]
            k = state.k
            blocks = [DenseBlock(np.zeros((0, k)), np.zeros((n, 0)), np.zeros((n, 0), bool),
                                 Family.GAUSSIAN)]
        return FactorContext(state.means[pos], precision, blocks)

    def data_loss(self, state) -> float:
        """``sum_obs b(theta) - x theta`` over every relation."""
        total = 0.0
        for rel in self.relations:
            values, mask = self.dense[rel.id]
            theta = state.factors[rel.row_type - 1] @ state.factors[rel.col_type - 1].T
            theta = np.where(mask, theta, 0.0)
            terms = np.asarray(expfam.log_partition(rel.family, theta)) - values * theta
            total += float(np.where(mask, terms, 0.0).sum())
        return total
