"""Hold-out and fold-in prediction from point estimates or posterior samples."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import expfam
from .exceptions import RequestError, StateError
from .expfam import Family
from .hmh import PosteriorChain, hmh_row_step, init_row_cache
from .linalg import cholesky, spd_inverse
from .map_engine import map_row_update
from .row_glm import ObservationBlock, RowContext, row_gradient
from .schema import ObservedMatrix, RelationalSchema, format_float
from .state import ModelState

FOLDIN_MAP_TOL = 1e-8
FOLDIN_MAP_MAX_ITER = 100


@dataclass
class PredictionRequest:
    relation: str
    targets: np.ndarray  # (n, 2) 0-based (row, col)
    mode: str = "holdout"

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1, 2)
        if self.mode not in ("holdout", "foldin"):
            raise RequestError(f"unknown mode {self.mode!r}")


def _relation(state: ModelState, relation_id: str):
    try:
        return state.relation(relation_id)
    except KeyError:
        raise RequestError(f"unknown relation {relation_id!r}") from None


def _transform(state: ModelState, rel):
    if rel.family is Family.GAUSSIAN:
        return state.transforms.get(rel.id, (0.0, 1.0))
    return 0.0, 1.0


def natural_parameters(state: ModelState, request: PredictionRequest) -> np.ndarray:
    rel = _relation(state, request.relation)
    u = state.factors[rel.row_type - 1]
    v = state.factors[rel.col_type - 1]
    rows, cols = request.targets[:, 0], request.targets[:, 1]
    if rows.size and (rows.min() < 0 or rows.max() >= len(u) or cols.min() < 0 or cols.max() >= len(v)):
        raise RequestError(f"target outside the trained dimensions of {rel.id!r}")
    return np.einsum("ij,ij->i", u[rows], v[cols])


def predict_point(state: ModelState, request: PredictionRequest, natural=False):
    """``f(U_i . V_j)`` per target, in original units.

    With ``natural=True`` returns ``(means, natural_parameters)``.
    """
    rel = _relation(state, request.relation)
    theta = natural_parameters(state, request)
    shift, scale = _transform(state, rel)
    means = np.asarray(expfam.mean_link(rel.family, theta), float) * scale + shift
    return (means, theta) if natural else means


def _samples(source):
    samples = source.samples if isinstance(source, PosteriorChain) else list(source)
    if not samples:
        raise StateError("posterior chain holds no retained samples")
    return samples


def predict_bayes(chain, request: PredictionRequest, natural=False):
    """Monte Carlo posterior predictive mean over the retained samples.

    With ``natural=True`` returns ``(means, thetas)`` with ``thetas`` of shape
    ``(S, n_targets)``.
    """
    samples = _samples(chain)
    thetas = np.stack([natural_parameters(s, request) for s in samples])
    rel = _relation(samples[0], request.relation)
    shift, scale = _transform(samples[0], rel)
    means = np.asarray(expfam.mean_link(rel.family, thetas), float).mean(axis=0) * scale + shift
    return (means, thetas) if natural else means


def evaluate_mse(predictions, truth, transform=None) -> float:
    """Mean squared error; with ``transform=(shift, scale)`` it is measured in standardized units."""
    p = np.asarray(predictions, float).reshape(-1)
    t = np.asarray(truth, float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    err = p - t
    if transform is not None:
        err = err / transform[1]
    return float(np.mean(err * err))


def holdout_split(schema: RelationalSchema, relation_id: str, fraction: float = 0.1, rng=None):
    """Remove a random ``fraction`` of one relation's entries for testing.

    Returns ``(train_schema, test_matrix)``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    mat = schema.matrices[relation_id]
    n = len(mat)
    perm = rng.permutation(n)
    n_test = int(round(fraction * n))
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return schema.with_matrix(mat.subset(train)), mat.subset(test)



def holdout_entities(schema: RelationalSchema, type_id: int, entities):
    """Remove whole entities of one type, e.g. to fold them back in later.

    Remaining entities of that type keep their relative order and are
    renumbered from 0.  Returns ``(train_schema, removed)`` where ``removed``
    maps each relation touching the type to an :class:`ObservedMatrix` of the
    dropped entries; its indices on the held-out side are the original ones.
    """
    entities = np.unique(np.asarray(entities, dtype=np.int64))
    et = schema.entity_type(type_id)
    if entities.size == 0 or entities.size >= et.count or entities.min() < 0 or entities.max() >= et.count:
        raise RequestError("held-out entities must be a non-empty proper subset of the type")
    keep = np.setdiff1d(np.arange(et.count), entities)
    new_index = np.full(et.count, -1, dtype=np.int64)
    new_index[keep] = np.arange(keep.size)
    types = [replace(t, count=keep.size) if t.id == type_id else t for t in schema.entity_types]
    matrices, removed = dict(schema.matrices), {}
    for rel in schema.relations:
        if type_id not in (rel.row_type, rel.col_type):
            continue
        mat = schema.matrices[rel.id]
        own = mat.rows if rel.row_type == type_id else mat.cols
        drop = np.isin(own, entities)
        removed[rel.id] = mat.subset(np.flatnonzero(drop))
        kept = mat.subset(np.flatnonzero(~drop))
        if rel.row_type == type_id:
            kept = replace(kept, rows=new_index[kept.rows])
        else:
            kept = replace(kept, cols=new_index[kept.cols])
        matrices[rel.id] = kept
    return RelationalSchema(types, schema.relations, matrices), removed

# -- fold-in ----------------------------------------------------------------

@dataclass
class FoldinConfig:
    samples_per_state: int = 5
    burn_in: int = 20
    thin: int = 2
    observed_fraction: float = 2.0 / 3.0
    posterior_states_used: int = 10

    def __post_init__(self):
        if min(self.samples_per_state, self.thin, self.posterior_states_used) < 1 or self.burn_in < 0:
            raise ValueError("fold-in counts must be positive")
        if not 0.0 < self.observed_fraction < 1.0:
            raise ValueError("observed_fraction must lie in (0, 1)")


@dataclass
class FoldinResult:
    relation: str
    side: str
    conditioning: np.ndarray  # counterpart indices used to fit the new row
    evaluation: np.ndarray  # counterpart indices predicted
    predictions: np.ndarray  # original units
    actual: np.ndarray  # original units
    rows: list = field(default_factory=list)  # sampled (or MAP) rows

    @property
    def row_samples(self) -> int:
        return len(self.rows)


def _new_row_context(state: ModelState, rel, side, counterparts, values_std) -> RowContext:
    own = (rel.row_type if side == "row" else rel.col_type) - 1
    other = (rel.col_type if side == "row" else rel.row_type) - 1
    v = state.factors[other]
    if counterparts.size and (counterparts.min() < 0 or counterparts.max() >= len(v)):
        raise RequestError("fold-in observation references an untrained counterpart entity")
    block = ObservationBlock(v[counterparts], values_std, rel.family)
    return RowContext(state.means[own], spd_inverse(state.covs[own]), [block])


def _counterpart_factor(state, rel, side):
    return state.factors[(rel.col_type if side == "row" else rel.row_type) - 1]


def fold_in_rows(source, relation_id: str, counterparts, values, config: FoldinConfig | None = None,
                 rng=None, side: str = "col"):
    """Latent rows for a new entity conditioned on raw ``values``.

    A :class:`ModelState` source gives one MAP row per call (``[(state, u)]``);
    a chain gives ``samples_per_state`` HMH draws for each of its last
    ``posterior_states_used`` retained states.
    """
    config = config or FoldinConfig()
    rng = np.random.default_rng(rng)
    counterparts = np.asarray(counterparts, dtype=np.int64).reshape(-1)
    if counterparts.size == 0:
        raise RequestError("new entity has no conditioning observations")
    if side not in ("row", "col"):
        raise RequestError("side must be 'row' or 'col'")

    if isinstance(source, ModelState):
        rel = _relation(source, relation_id)
        shift, scale = _transform(source, rel)
        x = (np.asarray(values, float) - shift) / scale
        ctx = _new_row_context(source, rel, side, counterparts, x)
        u = source.means[(rel.row_type if side == "row" else rel.col_type) - 1].copy()
        for _ in range(FOLDIN_MAP_MAX_ITER):
            if np.linalg.norm(row_gradient(ctx, u)) < FOLDIN_MAP_TOL:
                break
            u = map_row_update(ctx, u)
        return [(source, u)]

    samples = _samples(source)[-config.posterior_states_used:]
    out = []
    total_steps = config.burn_in + config.thin * config.samples_per_state
    for state in samples:
        rel = _relation(state, relation_id)
        shift, scale = _transform(state, rel)
        x = (np.asarray(values, float) - shift) / scale
        ctx = _new_row_context(state, rel, side, counterparts, x)
        own = (rel.row_type if side == "row" else rel.col_type) - 1
        chol = cholesky(state.covs[own])
        u = state.means[own] + chol @ rng.standard_normal(state.k)
        cache = init_row_cache(ctx, u, rng.uniform())
        for step in range(1, total_steps + 1):
            u, cache, _ = hmh_row_step(ctx, u, cache, rng)
            if step > config.burn_in and (step - config.burn_in) % config.thin == 0:
                out.append((state, u.copy()))
    return out


def fold_in(source, relation_id: str, new_entity_observations, config: FoldinConfig | None = None,
            rng=None, side: str = "col") -> FoldinResult:
    """Fold in one new entity and predict its held-back observations.

    ``new_entity_observations`` is ``(counterpart_indices, raw_values)``.
    A random ``observed_fraction`` conditions the new row; the rest is
    predicted (posterior-predictive mean for chains, MAP otherwise).
    """
    config = config or FoldinConfig()
    rng = np.random.default_rng(rng)
    idx, values = new_entity_observations
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    values = np.asarray(values, float).reshape(-1)
    if idx.size != values.size:
        raise RequestError("counterpart indices and values differ in length")
    if idx.size == 0:
        raise RequestError("new entity has no observations")
    perm = rng.permutation(idx.size)
    n_cond = int(round(config.observed_fraction * idx.size))
    if n_cond == 0:
        raise RequestError("no conditioning observations after the split")
    cond, held = np.sort(perm[:n_cond]), np.sort(perm[n_cond:])
    rows = fold_in_rows(source, relation_id, idx[cond], values[cond], config, rng, side)
    preds = np.zeros(held.size)
    for state, u in rows:
        rel = state.relation(relation_id)
        theta = _counterpart_factor(state, rel, side)[idx[held]] @ u
        shift, scale = _transform(state, rel)
        preds += np.asarray(expfam.mean_link(rel.family, theta), float) * scale + shift
    preds /= len(rows)
    return FoldinResult(relation_id, side, idx[cond], idx[held], preds, values[held],
                        [u for _, u in rows])


# -- output -----------------------------------------------------------------

PREDICTION_HEADER = ("relation_id", "row", "col", "predicted", "actual", "squared_error")


def prediction_records(relation_id, targets, predicted, actual, transform=None):
    """Rows for the prediction CSV; squared error in standardized units when a transform is given."""
    scale = 1.0 if transform is None else transform[1]
    out = []
    for (r, c), p, a in zip(np.asarray(targets).reshape(-1, 2).tolist(),
                            np.asarray(predicted, float).tolist(), np.asarray(actual, float).tolist()):
        out.append((relation_id, int(r), int(c), p, a, ((p - a) / scale) ** 2))
    return out


def write_predictions(path, records):
    """CSV with 1-based indices; floats written in shortest round-trip form."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for rid, r, c, p, a, se in records:
            w.writerow([rid, r + 1, c + 1, format_float(p), format_float(a), format_float(se)])
    return path


def read_predictions(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [(r["relation_id"], int(r["row"]) - 1, int(r["col"]) - 1, float(r["predicted"]),
             float(r["actual"]), float(r["squared_error"])) for r in rows]


def summarize(records, extra=None) -> dict:
    per = {}
    for rid, _, _, _, _, se in records:
        per.setdefault(rid, []).append(se)
    summary = {"relations": {rid: {"mse": float(np.mean(v)), "count": len(v)}
                             for rid, v in sorted(per.items())}}
    if extra:
        summary.update(extra)
    return summary


def write_summary(path, summary):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def request_for(test: ObservedMatrix) -> PredictionRequest:
    return PredictionRequest(test.relation, np.stack([test.rows, test.cols], axis=1))
