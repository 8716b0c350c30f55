"""MAP training by alternating Newton projections (CMF and hierarchical H-CMF)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import parallel
from .exceptions import NumericalError, TrainingError
from .linalg import cholesky, spd_inverse
from .niw import NiwHyperprior, niw_logpdf, niw_mode, niw_posterior
from .row_glm import DenseData, FactorContext, RowContext, newton_step, row_negloglik
from .schema import RelationalSchema, require_valid
from .state import ModelState, empty_state

logger = logging.getLogger(__name__)

PSYCHIC_FLOOR = 1e-6


@dataclass
class MapConfig:
    k: int = 25
    max_sweeps: int = 200
    rel_tol: float = 1e-6
    hierarchical: bool = True
    max_newton_halvings: int = 20
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")


def init_factors(schema: RelationalSchema, k: int, seed: int) -> ModelState:
    """Rows drawn from ``N(0, I_k)``; priors set to ``(0, I)``."""
    state = empty_state(schema, k)
    for pos, t in enumerate(schema.entity_types):
        state.factors[pos] = parallel.stream(seed, 0, pos, parallel.INIT).standard_normal((t.count, k))
    return state


def map_row_update(ctx: RowContext, u, max_halvings: int = 20) -> np.ndarray:
    """Damped Newton step: halve until the row objective does not increase."""
    u = np.asarray(u, float)
    start = row_negloglik(ctx, u)
    full, _ = newton_step(ctx, u, 1.0)
    direction = u - full
    step = 1.0
    for _ in range(max_halvings + 1):
        cand = u - step * direction
        try:
            value = row_negloglik(ctx, cand)
        except NumericalError:
            value = np.inf
        if value <= start:
            return cand
        step *= 0.5
    return u


def map_update_factor(fctx: FactorContext, u: np.ndarray, max_halvings: int = 20,
                      threads: int = 1) -> np.ndarray:
    """:func:`map_row_update` applied to every row of a factor."""

    def work(sl):
        ctx = fctx.take(np.arange(sl.start, sl.stop))
        cur = u[sl]
        start = ctx.negloglik(cur)
        full, _, _ = ctx.newton(cur, np.ones(ctx.n))
        direction = cur - full
        out = cur.copy()
        step = np.ones(ctx.n)
        todo = np.arange(ctx.n)
        for _ in range(max_halvings + 1):
            cand = cur[todo] - step[todo, None] * direction[todo]
            value = ctx.take(todo).negloglik(cand, strict=False)
            ok = value <= start[todo]
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
            step[todo] *= 0.5
        return out

    return np.concatenate(parallel.chunked_map(work, fctx.n, threads), axis=0)


def prior_loss(state: ModelState, pos: int, precision=None) -> float:
    """``sum_i -log N(U_i | mu, Sigma)`` for one factor."""
    sigma = state.covs[pos]
    if precision is None:
        precision = spd_inverse(sigma)
    u = state.factors[pos]
    d = u - state.means[pos]
    k = state.k
    logdet = 2.0 * float(np.log(np.diag(cholesky(sigma))).sum())
    quad = float(np.einsum("ni,ij,nj->", d, precision, d))
    return 0.5 * quad + 0.5 * u.shape[0] * (k * np.log(2.0 * np.pi) + logdet)


def objective(data: DenseData, state: ModelState, hyperpriors=None) -> float:
    """Negative log-posterior (up to data base-measure constants).

    With ``hyperpriors`` the hyperprior density of each ``(mu_e, Sigma_e)`` is
    included, giving the quantity minimised by hierarchical MAP.
    """
    total = data.data_loss(state)
    for pos in range(state.n_types):
        total += prior_loss(state, pos)
        if hyperpriors is not None:
            total -= niw_logpdf(state.means[pos], state.covs[pos], hyperpriors[pos])
    return total


def default_hyperpriors(schema: RelationalSchema, k: int) -> list:
    return [NiwHyperprior.default(k) for _ in schema.entity_types]


def fit_map(schema: RelationalSchema, config: MapConfig, fixed_priors=None,
            hyperpriors=None, init_state: ModelState | None = None):
    """Alternating Newton projections; returns ``(state, objective trace)``.

    Entity types are swept in id order.  In hierarchical mode each factor's
    ``(mu, Sigma)`` is set to the normal-Inverse-Wishart posterior mode right
    after that factor's rows are updated.  Without hierarchy the priors stay
    at ``fixed_priors`` (default ``(0, I)`` for every type).
    """
    require_valid(schema)
    data = DenseData(schema)
    k = config.k
    state = init_state.copy() if init_state is not None else init_factors(schema, k, config.seed)
    if config.hierarchical:
        hyperpriors = hyperpriors or default_hyperpriors(schema, k)
    else:
        hyperpriors = None
        if fixed_priors is not None:
            for pos, (mu, sigma) in enumerate(fixed_priors):
                state.means[pos] = np.asarray(mu, float).copy()
                state.covs[pos] = np.asarray(sigma, float).copy()

    trace = []
    for sweep in range(1, config.max_sweeps + 1):
        for pos in range(state.n_types):
            fctx = data.factor_context(state, pos)
            state.factors[pos] = map_update_factor(fctx, state.factors[pos],
                                                   config.max_newton_halvings, config.threads)
            if hyperpriors is not None:
                mu, sigma = niw_mode(niw_posterior(hyperpriors[pos], state.factors[pos]))
                state.means[pos], state.covs[pos] = mu, sigma
        value = objective(data, state, hyperpriors)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite objective at sweep {sweep}")
        trace.append(value)
        logger.debug("sweep %d objective %.10g", sweep, value)
        if len(trace) > 1 and trace[-2] - value < config.rel_tol * abs(trace[-2]):
            break
    return state, trace


def psychic_priors(reference: ModelState) -> list:
    """Zero means and diagonal covariances from a reference run's column variances."""
    out = []
    for u in reference.factors:
        var = np.maximum(u.var(axis=0), PSYCHIC_FLOOR)
        out.append((np.zeros(u.shape[1]), np.diag(var)))
    return out
