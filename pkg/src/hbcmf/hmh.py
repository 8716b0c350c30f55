"""Fully Bayesian training: Hessian Metropolis-Hastings rows + NIW Gibbs hyperparameters.

Each factor row is updated by a Metropolis-Hastings step whose Gaussian
proposal is centred on a random-length Newton step from the current row and
whose precision is the local Hessian of the row's negative log-posterior.
After every row of a factor has been updated, ``(mu, Sigma)`` of that factor
is redrawn from its normal-Inverse-Wishart conditional.

The step length ``eta`` that produced a cached proposal mean is stored with
the cache.  Treating it as part of the chain state makes the realised-mean
acceptance ratio exact.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import parallel
from .exceptions import NumericalError, StateError, TrainingError
from .linalg import cholesky, gaussian_logpdf_prec, solve_lower_t
from .map_engine import default_hyperpriors, init_factors, objective
from .niw import niw_posterior, sample_niw
from .row_glm import DenseData, RowContext, newton_step, row_negloglik
from .schema import RelationalSchema, require_valid
from .state import ModelState, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class RowProposalCache:
    """Forward proposal for one row: ``N(proposal_mean, hessian^{-1})``."""

    proposal_mean: np.ndarray
    hessian: np.ndarray
    eta: float = 1.0
    chol: np.ndarray | None = None

    def __post_init__(self):
        if self.chol is None:
            self.chol = cholesky(self.hessian)


@dataclass
class ProposalCaches:
    """Stacked :class:`RowProposalCache` for all rows of one factor."""

    means: np.ndarray  # (n, k)
    hessians: np.ndarray  # (n, k, k)
    chols: np.ndarray  # (n, k, k)
    etas: np.ndarray  # (n,)

    def take(self, rows) -> "ProposalCaches":
        return ProposalCaches(self.means[rows], self.hessians[rows], self.chols[rows], self.etas[rows])

    def row(self, i: int) -> RowProposalCache:
        return RowProposalCache(self.means[i].copy(), self.hessians[i].copy(),
                                float(self.etas[i]), self.chols[i].copy())

    @classmethod
    def concatenate(cls, parts) -> "ProposalCaches":
        return cls(*(np.concatenate([getattr(p, f) for p in parts], axis=0)
                     for f in ("means", "hessians", "chols", "etas")))


@dataclass
class StepResult:
    next: np.ndarray
    next_loss: np.ndarray
    caches: ProposalCaches
    accepted: np.ndarray
    log_rho: np.ndarray
    diagnostics: np.ndarray


def hmh_step_rows(kernel, current, current_loss, caches: ProposalCaches, z, eta, r,
                  proposal=None) -> StepResult:
    """One Hessian Metropolis-Hastings step for a stack of independent rows.

    ``kernel`` provides ``negloglik(u, strict)`` and ``newton(u, step, strict)``
    over ``(n, k)`` arrays.  ``z`` are standard normals ``(n, k)``, ``eta`` the
    step lengths for the backward Newton step and ``r`` the uniforms of the
    accept test.  ``proposal`` injects proposals instead of sampling them.
    """
    if proposal is None:
        proposal = caches.means + solve_lower_t(caches.chols, z)
    proposal = np.asarray(proposal, float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        finite = np.all(np.isfinite(proposal), axis=1)
        safe = np.where(finite[:, None], proposal, current)
        prop_loss = np.where(finite, kernel.negloglik(safe, strict=False), np.inf)
        # rows with an unusable proposal are rejected; evaluating them at
        # ``current`` only keeps the stacked Newton step finite
        usable = np.isfinite(prop_loss)
        at = np.where(usable[:, None], proposal, current)
        back_mean, back_h, back_chol = kernel.newton(at, eta, strict=False)
        log_fwd = gaussian_logpdf_prec(proposal, caches.means, caches.chols)
        log_bwd = gaussian_logpdf_prec(current, back_mean, back_chol)
        log_rho = (current_loss - prop_loss) + (log_bwd - log_fwd)
        ok = np.isfinite(log_rho)
        accepted = ok & (np.log(r) <= log_rho)
    acc = accepted[:, None]
    acc3 = accepted[:, None, None]
    new_caches = ProposalCaches(
        np.where(acc, back_mean, caches.means),
        np.where(acc3, back_h, caches.hessians),
        np.where(acc3, back_chol, caches.chols),
        np.where(accepted, eta, caches.etas),
    )
    return StepResult(np.where(acc, proposal, current), np.where(accepted, prop_loss, current_loss),
                      new_caches, accepted, log_rho, ~ok)


class _SingleRow:
    """Adapter exposing a :class:`RowContext` through the stacked-kernel API."""

    def __init__(self, ctx: RowContext):
        self.ctx = ctx

    def negloglik(self, u, strict=True):
        try:
            return np.array([row_negloglik(self.ctx, u[0])])
        except NumericalError:
            if strict:
                raise
            return np.array([np.inf])

    def newton(self, u, step, strict=True):
        new, h = newton_step(self.ctx, u[0], float(np.asarray(step).reshape(-1)[0]))
        return new[None], h[None], cholesky(h, row=self.ctx.row)[None]


def init_row_cache(ctx: RowContext, u, eta: float) -> RowProposalCache:
    mean, h = newton_step(ctx, u, eta)
    return RowProposalCache(mean, h, float(eta))


def hmh_row_step(ctx: RowContext, current, cache: RowProposalCache, rng, eta=None,
                 proposal=None, info=None):
    """Single-row Hessian Metropolis-Hastings step.

    Draws (in order) the proposal normals, the backward step length and the
    accept uniform from ``rng``.  ``eta`` forces the backward step length;
    ``proposal`` injects the proposed row.  If ``info`` is a dict it receives
    ``log_rho`` and ``diagnostic``.

    Returns ``(next, new_cache, accepted)``.
    """
    current = np.asarray(current, float)
    k = current.shape[0]
    z = rng.standard_normal(k)
    drawn_eta = rng.uniform()
    r = rng.uniform()
    step = drawn_eta if eta is None else float(eta)
    caches = ProposalCaches(cache.proposal_mean[None], cache.hessian[None], cache.chol[None],
                            np.array([cache.eta]))
    kernel = _SingleRow(ctx)
    res = hmh_step_rows(kernel, current[None], kernel.negloglik(current[None]), caches,
                        z[None], np.array([step]), np.array([r]),
                        None if proposal is None else np.asarray(proposal, float)[None])
    if info is not None:
        info["log_rho"] = float(res.log_rho[0])
        info["diagnostic"] = bool(res.diagnostics[0])
    accepted = bool(res.accepted[0])
    new_cache = res.caches.row(0) if accepted else cache
    return res.next[0].copy(), new_cache, accepted


# -- chains -----------------------------------------------------------------

@dataclass
class ChainConfig:
    k: int = 25
    epochs: int = 300
    burn_in: int = 50
    thin: int = 5
    samples: int = 20
    seed: int = 0
    eta: float | None = None  # None: Uniform[0, 1]; a number forces the step length
    refresh_proposals: bool = True
    hierarchical: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.thin < 1 or self.samples < 1:
            raise ValueError("thin and samples must be >= 1")
        if not 0 <= self.burn_in < self.epochs:
            raise ValueError("burn_in must be in [0, epochs)")
        if self.burn_in + self.thin * self.samples > self.epochs:
            raise ValueError("epochs too small for burn_in + thin * samples")
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    def retained_epochs(self) -> list:
        return [self.burn_in + self.thin * s for s in range(1, self.samples + 1)]


@dataclass
class PosteriorChain:
    samples: list
    retained_epochs: list
    accepted: np.ndarray  # (epochs, n_types)
    proposed: np.ndarray
    diagnostics: np.ndarray
    energy: list = field(default_factory=list)
    config: ChainConfig | None = None

    def acceptance_rate(self, start_epoch: int = 0) -> np.ndarray:
        """Per-factor acceptance rate over epochs ``> start_epoch``."""
        acc = self.accepted[start_epoch:].sum(axis=0)
        prop = self.proposed[start_epoch:].sum(axis=0)
        return acc / np.maximum(prop, 1)


def hmh_init(schema: RelationalSchema, k: int, seed: int, data: DenseData | None = None,
             eta: float | None = None):
    """Initial rows from ``N(0, I)`` and their first forward proposals.

    Step lengths are drawn from Uniform[0, 1] unless ``eta`` forces them.
    """
    data = data or DenseData(schema)
    state = init_factors(schema, k, seed)
    caches = []
    for pos in range(state.n_types):
        fctx = data.factor_context(state, pos)
        eta_rows = parallel.stream(seed, 0, pos, parallel.INIT_ETA).uniform(size=fctx.n)
        if eta is not None:
            eta_rows = np.full(fctx.n, float(eta))
        means, h, chol = fctx.newton(state.factors[pos], eta_rows)
        caches.append(ProposalCaches(means, h, chol, eta_rows))
    return state, caches


def _refresh(fctx, u, etas):
    means, h, chol = fctx.newton(u, etas)
    return ProposalCaches(means, h, chol, etas.copy())


def run_chain(schema: RelationalSchema, config: ChainConfig, hyperpriors=None,
              fixed_priors=None, callback=None) -> PosteriorChain:
    """Block sampler: HMH for every factor row, Gibbs for each factor's ``(mu, Sigma)``.

    Epochs are numbered from 1.  Random numbers for epoch ``t``, entity type
    ``e`` come from streams keyed by ``(seed, t, e)``, so results do not
    depend on ``config.threads``.
    """
    require_valid(schema)
    data = DenseData(schema)
    k = config.k
    n_types = schema.n_types
    if config.hierarchical:
        hyperpriors = hyperpriors or default_hyperpriors(schema, k)
    else:
        hyperpriors = None
    state, caches = hmh_init(schema, k, config.seed, data, config.eta)
    if not config.hierarchical and fixed_priors is not None:
        for pos, (mu, sigma) in enumerate(fixed_priors):
            state.means[pos] = np.asarray(mu, float).copy()
            state.covs[pos] = np.asarray(sigma, float).copy()

    retain = set(config.retained_epochs())
    chain = PosteriorChain([], [], np.zeros((config.epochs, n_types), dtype=np.int64),
                           np.zeros((config.epochs, n_types), dtype=np.int64),
                           np.zeros((config.epochs, n_types), dtype=np.int64), [], config)

    for epoch in range(1, config.epochs + 1):
        for pos in range(n_types):
            fctx = data.factor_context(state, pos)
            u = state.factors[pos]
            n = fctx.n
            rng = parallel.stream(config.seed, epoch, pos, parallel.ROWS)
            z = rng.standard_normal((n, k))
            eta = rng.uniform(size=n)
            r = rng.uniform(size=n)
            if config.eta is not None:
                eta = np.full(n, float(config.eta))
            cache = caches[pos]

            def work(sl, fctx=fctx, u=u, cache=cache, z=z, eta=eta, r=r):
                rows = np.arange(sl.start, sl.stop)
                ctx = fctx.take(rows)
                cur = u[sl]
                c = cache.take(sl)
                if config.refresh_proposals:
                    c = _refresh(ctx, cur, c.etas)
                return hmh_step_rows(ctx, cur, ctx.negloglik(cur), c, z[sl], eta[sl], r[sl])

            parts = parallel.chunked_map(work, n, config.threads)
            state.factors[pos] = np.concatenate([p.next for p in parts], axis=0)
            caches[pos] = ProposalCaches.concatenate([p.caches for p in parts])
            chain.accepted[epoch - 1, pos] = sum(int(p.accepted.sum()) for p in parts)
            chain.proposed[epoch - 1, pos] = n
            chain.diagnostics[epoch - 1, pos] = sum(int(p.diagnostics.sum()) for p in parts)
            if not np.all(np.isfinite(state.factors[pos])):
                raise TrainingError(f"non-finite factor state at epoch {epoch}")
            if hyperpriors is not None:
                post = niw_posterior(hyperpriors[pos], state.factors[pos])
                mu, sigma = sample_niw(post, parallel.stream(config.seed, epoch, pos, parallel.HYPER))
                state.means[pos], state.covs[pos] = mu, sigma
        energy = objective(data, state, hyperpriors)
        if not np.isfinite(energy):
            raise TrainingError(f"non-finite energy at epoch {epoch}")
        chain.energy.append(energy)
        if epoch in retain:
            chain.samples.append(state.copy())
            chain.retained_epochs.append(epoch)
        if callback is not None:
            callback(epoch, state, chain)
    return chain


def save_chain(chain: PosteriorChain, directory, schema_hash=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seed = chain.config.seed if chain.config is not None else None
    for i, (sample, epoch) in enumerate(zip(chain.samples, chain.retained_epochs)):
        save_checkpoint(sample, directory / f"sample_{i:03d}", schema_hash=schema_hash, seed=seed,
                        extra={"epoch": epoch})
    doc = {
        "retained_epochs": chain.retained_epochs,
        "accepted": chain.accepted.tolist(),
        "proposed": chain.proposed.tolist(),
        "diagnostics": chain.diagnostics.tolist(),
        "energy": chain.energy,
        "seed": seed,
        "config": asdict(chain.config) if chain.config is not None else None,
    }
    (directory / "chain.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return directory


def load_chain(directory) -> PosteriorChain:
    directory = Path(directory)
    path = directory / "chain.json"
    if not path.exists():
        raise StateError(f"chain not found: {directory}")
    doc = json.loads(path.read_text())
    samples = [load_checkpoint(directory / f"sample_{i:03d}")[0]
               for i in range(len(doc["retained_epochs"]))]
    config = ChainConfig(**doc["config"]) if doc.get("config") else None
    return PosteriorChain(samples, doc["retained_epochs"], np.array(doc["accepted"]),
                          np.array(doc["proposed"]), np.array(doc["diagnostics"]),
                          doc["energy"], config)
