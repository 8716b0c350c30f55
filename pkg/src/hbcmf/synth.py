"""Synthetic relational data with planted low-rank structure."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import parallel
from .expfam import Family
from .niw import NiwHyperprior, niw_posterior, sample_niw
from .schema import (EntityType, ObservedMatrix, RelationalSchema, RelationSpec,
                     standardize_gaussian)
from .state import ModelState

# numpy's Poisson sampler rejects rates above ~1e18
_POISSON_GEN_MAX_THETA = 40.0


@dataclass
class RelationSynth:
    id: str
    row_type: str
    col_type: str
    family: str = "gaussian"
    density: float = 1.0


@dataclass
class SynthSpec:
    entity_types: list  # [(name, count), ...]
    relations: list  # [RelationSynth, ...]
    k_true: int = 5
    noise: float = 1.0
    seed: int = 0
    standardize: bool = True

    def validate(self):
        if self.k_true < 1:
            raise ValueError("k_true must be >= 1")
        if not self.relations:
            raise ValueError("at least one relation is required")
        names = [n for n, _ in self.entity_types]
        for name, count in self.entity_types:
            if int(count) < 1:
                raise ValueError(f"entity type {name!r}: count must be >= 1")
        for rel in self.relations:
            if not rel.density > 0:
                raise ValueError("density must be positive")
            if rel.density > 1:
                raise ValueError("density must be at most 1")
            if rel.row_type not in names or rel.col_type not in names:
                raise ValueError(f"relation {rel.id!r} references an unknown entity type")
            Family.parse(rel.family)
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def generate(spec: SynthSpec):
    """Sample a dataset and its ground truth.

    Per entity type ``(mu, Sigma)`` is drawn from the default
    normal-Inverse-Wishart hyperprior, rows from ``N(mu, Sigma)``, and each
    relation's entries from its family at natural parameter ``U V^T``; each
    entry is observed independently with the relation's density.  Gaussian
    relations are standardized when ``spec.standardize`` is set.

    Returns ``(schema, truth)``; ``truth`` holds the planted factors and
    priors, whose products are natural parameters in generation units.
    """
    spec.validate()
    k = spec.k_true
    types = [EntityType(i + 1, name, int(count)) for i, (name, count) in enumerate(spec.entity_types)]
    by_name = {t.name: t.id for t in types}
    hyper = NiwHyperprior.default(k)
    prior_post = niw_posterior(hyper, np.zeros((0, k)))

    factors, means, covs = [], [], []
    for pos, t in enumerate(types):
        rng = parallel.stream(spec.seed, pos, parallel.SYNTH)
        mu, sigma = sample_niw(prior_post, rng)
        chol = np.linalg.cholesky(sigma)
        factors.append(mu + rng.standard_normal((t.count, k)) @ chol.T)
        means.append(mu)
        covs.append(sigma)

    relations, matrices = [], {}
    for r_pos, rs in enumerate(spec.relations):
        rel = RelationSpec(rs.id, by_name[rs.row_type], by_name[rs.col_type], rs.family)
        relations.append(rel)
        rng = parallel.stream(spec.seed, len(types) + r_pos, parallel.SYNTH)
        theta = factors[rel.row_type - 1] @ factors[rel.col_type - 1].T
        if rel.family is Family.BERNOULLI:
            values = (rng.random(theta.shape) < expit(theta)).astype(float)
        elif rel.family is Family.GAUSSIAN:
            values = theta + spec.noise * rng.standard_normal(theta.shape)
        else:
            values = rng.poisson(np.exp(np.minimum(theta, _POISSON_GEN_MAX_THETA))).astype(float)
        observed = rng.random(theta.shape) < rs.density
        rows, cols = np.nonzero(observed)
        mat = ObservedMatrix(rel.id, rows, cols, values[rows, cols])
        if spec.standardize and rel.family is Family.GAUSSIAN:
            mat = standardize_gaussian(mat)[0]
        matrices[rel.id] = mat

    schema = RelationalSchema(types, relations, matrices)
    truth = ModelState(factors, means, covs, tuple(relations), tuple(t.name for t in types), {})
    return schema, truth


def three_type_fixture(seed: int = 0, x_density: float = 0.3, y_density: float = 0.3,
                       counts=(400, 60, 100), k_true: int = 5, noise: float = 1.0):
    """Desk-scale word / stimulus / voxel dataset.

    ``X = Co-occurs(word, stimulus)`` is Bernoulli and
    ``Y = Response(stimulus, voxel)`` is Gaussian (standardized).
    """
    spec = SynthSpec(
        entity_types=[("word", counts[0]), ("stimulus", counts[1]), ("voxel", counts[2])],
        relations=[RelationSynth("X", "word", "stimulus", "bernoulli", x_density),
                   RelationSynth("Y", "stimulus", "voxel", "gaussian", y_density)],
        k_true=k_true, noise=noise, seed=seed)
    return generate(spec)
