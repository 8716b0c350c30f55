"""Model state (factors and per-type Gaussian priors) and checkpoint I/O.

Checkpoint layout::

    <dir>/metadata.json
    <dir>/factor_<type id>.bin   # little-endian float64, row-major
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import StateError
from .expfam import Family
from .schema import RelationalSchema, RelationSpec

CHECKPOINT_FORMAT = "hbcmf-checkpoint-1"


@dataclass
class ModelState:
    """Low-rank factors ``U^(e)`` and priors ``(mu_e, Sigma_e)``, one per entity type.

    Lists are aligned with the schema's entity types (position = id - 1).
    ``transforms`` maps Gaussian relation ids to ``(shift, scale)`` so
    predictions can be returned in original units.
    """

    factors: list
    means: list
    covs: list
    relations: tuple = ()
    type_names: tuple = ()
    transforms: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.factors[0].shape[1]

    @property
    def n_types(self) -> int:
        return len(self.factors)

    def copy(self) -> "ModelState":
        return ModelState([f.copy() for f in self.factors], [m.copy() for m in self.means],
                          [c.copy() for c in self.covs], self.relations, self.type_names,
                          dict(self.transforms))

    def relation(self, relation_id: str) -> RelationSpec:
        for rel in self.relations:
            if rel.id == relation_id:
                return rel
        raise KeyError(relation_id)

    def check(self):
        """Raise :class:`StateError` unless every invariant holds."""
        if not (len(self.factors) == len(self.means) == len(self.covs)):
            raise StateError("factor / prior lists differ in length")
        k = self.k
        for pos, (u, mu, sigma) in enumerate(zip(self.factors, self.means, self.covs)):
            if u.ndim != 2 or u.shape[1] != k or mu.shape != (k,) or sigma.shape != (k, k):
                raise StateError(f"entity type {pos + 1}: inconsistent shapes")
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
                raise StateError(f"entity type {pos + 1}: non-finite entries")
            try:
                np.linalg.cholesky(sigma)
            except np.linalg.LinAlgError:
                raise StateError(f"entity type {pos + 1}: prior covariance not positive-definite") from None
        return self


def empty_state(schema: RelationalSchema, k: int) -> ModelState:
    """Zero factors with ``(0, I)`` priors, carrying the schema's metadata."""
    return ModelState(
        factors=[np.zeros((t.count, k)) for t in schema.entity_types],
        means=[np.zeros(k) for _ in schema.entity_types],
        covs=[np.eye(k) for _ in schema.entity_types],
        relations=tuple(schema.relations),
        type_names=tuple(t.name for t in schema.entity_types),
        transforms={rid: (m.shift, m.scale) for rid, m in schema.matrices.items()
                    if schema.relation(rid).family is Family.GAUSSIAN},
    )


def save_checkpoint(state: ModelState, directory, schema_hash=None, seed=None, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for pos, u in enumerate(state.factors):
        name = f"factor_{pos + 1}.bin"
        np.ascontiguousarray(u, dtype="<f8").tofile(directory / name)
        files.append({"file": name, "rows": int(u.shape[0]), "cols": int(u.shape[1])})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "schema_hash": schema_hash,
        "seed": seed,
        "k": state.k,
        "entity_types": list(state.type_names),
        "relations": [{"id": r.id, "row_type": r.row_type, "col_type": r.col_type,
                       "family": r.family.value} for r in state.relations],
        "families": {r.id: r.family.value for r in state.relations},
        "priors": [{"mu": mu.tolist(), "sigma": sigma.tolist()}
                   for mu, sigma in zip(state.means, state.covs)],
        "standardization": {rid: {"shift": s, "scale": c}
                            for rid, (s, c) in sorted(state.transforms.items())},
        "factors": files,
    }
    if extra:
        meta.update(extra)
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[ModelState, dict]:
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.exists():
        raise StateError(f"checkpoint not found: {directory}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"{meta_path}: unrecognised checkpoint format")
    factors = []
    for entry in meta["factors"]:
        arr = np.fromfile(directory / entry["file"], dtype="<f8")
        factors.append(arr.reshape(entry["rows"], entry["cols"]).astype(float))
    state = ModelState(
        factors=factors,
        means=[np.asarray(p["mu"], dtype=float) for p in meta["priors"]],
        covs=[np.asarray(p["sigma"], dtype=float) for p in meta["priors"]],
        relations=tuple(RelationSpec(r["id"], r["row_type"], r["col_type"], r["family"])
                        for r in meta["relations"]),
        type_names=tuple(meta["entity_types"]),
        transforms={rid: (v["shift"], v["scale"]) for rid, v in meta["standardization"].items()},
    )
    return state.check(), meta
