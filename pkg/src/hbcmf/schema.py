"""Relational schema: entity types, relations, observed matrices, file I/O.

Inside the package entity indices are 0-based; files and validation messages
use the 1-based convention of the on-disk triplet format.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import SchemaError
from .expfam import Family, admissible

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EntityType:
    id: int
    name: str
    count: int


@dataclass(frozen=True)
class RelationSpec:
    id: str
    row_type: int
    col_type: int
    family: Family

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))


@dataclass(frozen=True, eq=False)
class ObservedMatrix:
    """Sparse triplets of one relation.

    ``rows`` and ``cols`` are 0-based.  ``shift`` and ``scale`` map stored
    values back to the original units: ``raw = value * scale + shift``.
    """

    relation: str
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        for name, dtype in (("rows", np.int64), ("cols", np.int64), ("values", float)):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise SchemaError(f"relation {self.relation!r}: triplet arrays differ in length")

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_triplets(cls, relation, triplets, one_based=False, **kw):
        arr = np.asarray(triplets, dtype=float).reshape(-1, 3)
        offset = 1 if one_based else 0
        return cls(relation, arr[:, 0].astype(np.int64) - offset,
                   arr[:, 1].astype(np.int64) - offset, arr[:, 2], **kw)

    def subset(self, index) -> "ObservedMatrix":
        return replace(self, rows=self.rows[index], cols=self.cols[index],
                       values=self.values[index])

    def to_raw(self, values=None):
        values = self.values if values is None else np.asarray(values, dtype=float)
        return values * self.scale + self.shift

    def to_standard(self, raw):
        return (np.asarray(raw, dtype=float) - self.shift) / self.scale


@dataclass(frozen=True, eq=False)
class RelationalSchema:
    entity_types: tuple
    relations: tuple
    matrices: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "matrices", dict(self.matrices))

    @property
    def n_types(self):
        return len(self.entity_types)

    def type_index(self, type_id: int) -> int:
        for pos, et in enumerate(self.entity_types):
            if et.id == type_id:
                return pos
        raise SchemaError(f"unknown entity type id {type_id}")

    def entity_type(self, type_id: int) -> EntityType:
        return self.entity_types[self.type_index(type_id)]

    def relation(self, relation_id: str) -> RelationSpec:
        for rel in self.relations:
            if rel.id == relation_id:
                return rel
        raise SchemaError(f"unknown relation {relation_id!r}")

    def shape(self, relation_id: str):
        rel = self.relation(relation_id)
        return (self.entity_type(rel.row_type).count,
                self.entity_type(rel.col_type).count)

    def dense(self, relation_id: str):
        """Return ``(values, mask)`` dense arrays for one relation."""
        mat = self.matrices[relation_id]
        shape = self.shape(relation_id)
        values = np.zeros(shape)
        mask = np.zeros(shape, dtype=bool)
        values[mat.rows, mat.cols] = mat.values
        mask[mat.rows, mat.cols] = True
        return values, mask

    def with_matrix(self, matrix: ObservedMatrix) -> "RelationalSchema":
        matrices = dict(self.matrices)
        matrices[matrix.relation] = matrix
        return replace(self, matrices=matrices)

    def fingerprint(self) -> str:
        """Stable SHA-256 over structure and data."""
        h = hashlib.sha256()
        h.update(json.dumps(
            {"types": [[t.id, t.name, t.count] for t in self.entity_types],
             "relations": [[r.id, r.row_type, r.col_type, r.family.value]
                           for r in self.relations]},
            sort_keys=True).encode())
        for rel in self.relations:
            mat = self.matrices.get(rel.id)
            if mat is None:
                continue
            for arr in (mat.rows, mat.cols, mat.values):
                h.update(np.ascontiguousarray(arr).astype("<f8").tobytes())
            h.update(np.array([mat.shift, mat.scale], dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Issue:
    message: str
    relation: str | None = None
    coords: tuple | None = None

    def __str__(self):
        where = ""
        if self.relation is not None:
            where = f"[{self.relation}] "
        if self.coords is not None:
            where += f"at {self.coords} "
        return f"{where}{self.message}"


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple = ()

    @property
    def ok(self):
        return not self.errors

    def __str__(self):
        if self.ok:
            return "schema OK"
        return "\n".join(str(e) for e in self.errors)


def validate_schema(schema: RelationalSchema) -> ValidationReport:
    """Check every schema and data invariant; never raises."""
    errors = []
    types = schema.entity_types
    if not types:
        errors.append(Issue("no entity types"))
    ids = [t.id for t in types]
    if sorted(ids) != list(range(1, len(ids) + 1)):
        errors.append(Issue(f"entity type ids must be 1..{len(ids)} without duplicates, got {ids}"))
    names = [t.name for t in types]
    if len(set(names)) != len(names):
        errors.append(Issue("duplicate entity type names"))
    for t in types:
        if int(t.count) < 1:
            errors.append(Issue(f"entity type {t.name!r} has count {t.count} < 1"))
    counts = {t.id: t.count for t in types}

    if not schema.relations:
        errors.append(Issue("no relations"))
    rel_ids = [r.id for r in schema.relations]
    if len(set(rel_ids)) != len(rel_ids):
        errors.append(Issue("duplicate relation ids"))

    for rel in schema.relations:
        bad_ref = False
        for side in (rel.row_type, rel.col_type):
            if side not in counts:
                errors.append(Issue(f"references undeclared entity type {side}", rel.id))
                bad_ref = True
        if rel.row_type == rel.col_type:
            errors.append(Issue("self-relations (row type == column type) are not supported", rel.id))
        mat = schema.matrices.get(rel.id)
        if mat is None:
            errors.append(Issue("no observed matrix", rel.id))
            continue
        if len(mat) == 0:
            errors.append(Issue("matrix has no observed entries", rel.id))
        if bad_ref:
            continue
        n_row, n_col = counts[rel.row_type], counts[rel.col_type]
        out = (mat.rows < 0) | (mat.rows >= n_row) | (mat.cols < 0) | (mat.cols >= n_col)
        for i in np.flatnonzero(out):
            errors.append(Issue(f"index outside [1,{n_row}]x[1,{n_col}]", rel.id,
                                (int(mat.rows[i]) + 1, int(mat.cols[i]) + 1)))
        flat = mat.rows * max(n_col, 1) + mat.cols
        uniq, first, cnt = np.unique(flat, return_index=True, return_counts=True)
        for i in first[cnt > 1]:
            errors.append(Issue("duplicate entry", rel.id,
                                (int(mat.rows[i]) + 1, int(mat.cols[i]) + 1)))
        ok_vals = admissible(rel.family, mat.values)
        for i in np.flatnonzero(~ok_vals):
            errors.append(Issue(f"value {mat.values[i]!r} not admissible for {rel.family.value}",
                                rel.id, (int(mat.rows[i]) + 1, int(mat.cols[i]) + 1)))
    for rid in schema.matrices:
        if rid not in rel_ids:
            errors.append(Issue("matrix for undeclared relation", rid))

    if types and schema.relations and not _connected(schema):
        msg = "entity types and relations do not form a connected graph; training would decompose"
        logger.warning(msg)
        errors.append(Issue(msg))
    return ValidationReport(tuple(errors))


def _connected(schema):
    parent = {t.id: t.id for t in schema.entity_types}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for rel in schema.relations:
        if rel.row_type in parent and rel.col_type in parent:
            parent[find(rel.row_type)] = find(rel.col_type)
    return len({find(t) for t in parent}) <= 1


def require_valid(schema: RelationalSchema) -> RelationalSchema:
    report = validate_schema(schema)
    if not report.ok:
        raise SchemaError(f"invalid schema:\n{report}")
    return schema


def standardize_gaussian(matrix: ObservedMatrix, family=Family.GAUSSIAN):
    """Shift and scale observed entries to mean 0, population variance 1.

    Returns the standardized matrix together with the mean and standard
    deviation that were removed.  The matrix's ``shift``/``scale`` are updated
    so that ``to_raw`` still recovers the original units.
    """
    if Family.parse(family) is not Family.GAUSSIAN:
        raise SchemaError(f"relation {matrix.relation!r}: only Gaussian relations are standardized")
    if len(matrix) < 2:
        raise SchemaError(f"relation {matrix.relation!r}: need at least 2 observed entries")
    mean = float(np.mean(matrix.values))
    std = float(np.std(matrix.values))
    if not std > 0.0:
        raise SchemaError(f"relation {matrix.relation!r}: constant matrix")
    out = replace(matrix, values=(matrix.values - mean) / std,
                  shift=matrix.shift + mean * matrix.scale,
                  scale=matrix.scale * std)
    return out, mean, std


def standardize_schema(schema: RelationalSchema) -> RelationalSchema:
    """Standardize every Gaussian relation of a schema."""
    for rel in schema.relations:
        if rel.family is Family.GAUSSIAN:
            schema = schema.with_matrix(standardize_gaussian(schema.matrices[rel.id])[0])
    return schema



def remodel(schema: RelationalSchema, relation_id: str, family) -> RelationalSchema:
    """Model one relation with a different family.

    Values go back to raw units first; a Gaussian target is re-standardized.
    """
    family = Family.parse(family)
    mat = schema.matrices[relation_id]
    raw = replace(mat, values=mat.to_raw(), shift=0.0, scale=1.0)
    if family is Family.GAUSSIAN:
        raw = standardize_gaussian(raw)[0]
    relations = [replace(r, family=family) if r.id == relation_id else r for r in schema.relations]
    matrices = dict(schema.matrices)
    matrices[relation_id] = raw
    return RelationalSchema(schema.entity_types, relations, matrices)


def restrict(schema: RelationalSchema, relation_ids) -> RelationalSchema:
    """Keep only the named relations and the entity types they touch.

    Surviving types are renumbered contiguously from 1 in their original order.
    """
    keep = [schema.relation(rid) for rid in relation_ids]
    used = {r.row_type for r in keep} | {r.col_type for r in keep}
    types = [t for t in schema.entity_types if t.id in used]
    new_id = {t.id: i + 1 for i, t in enumerate(types)}
    types = [replace(t, id=new_id[t.id]) for t in types]
    relations = [replace(r, row_type=new_id[r.row_type], col_type=new_id[r.col_type]) for r in keep]
    matrices = {r.id: schema.matrices[r.id] for r in keep if r.id in schema.matrices}
    return RelationalSchema(types, relations, matrices)

# -- files ------------------------------------------------------------------

def format_float(x) -> str:
    """Shortest round-tripping positional (non-scientific) representation."""
    return np.format_float_positional(float(x), unique=True, trim="-")


def write_triplets(path, matrix: ObservedMatrix):
    lines = [f"{r + 1},{c + 1},{format_float(v)}\n"
             for r, c, v in zip(matrix.rows.tolist(), matrix.cols.tolist(), matrix.values.tolist())]
    Path(path).write_text("".join(lines))


def read_triplets(path, relation: str, **kw) -> ObservedMatrix:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"data file not found: {path}")
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    except ValueError as exc:
        raise SchemaError(f"cannot parse {path}: {exc}") from None
    if arr.size and arr.shape[1] != 3:
        raise SchemaError(f"{path}: expected 3 columns, found {arr.shape[1]}")
    if arr.size and np.any(arr[:, :2] != np.floor(arr[:, :2])):
        raise SchemaError(f"{path}: indices must be integers")
    return ObservedMatrix.from_triplets(relation, arr.reshape(-1, 3), one_based=True, **kw)


def load_schema(path) -> RelationalSchema:
    """Read a schema JSON file and the triplet CSVs it references."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"schema file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from None
    try:
        types = [EntityType(i + 1, str(t["name"]), int(t["count"]))
                 for i, t in enumerate(doc["entity_types"])]
        by_name = {t.name: t.id for t in types}

        def ref(v):
            if isinstance(v, int):
                return v
            if v not in by_name:
                raise SchemaError(f"relation references unknown entity type {v!r}")
            return by_name[v]

        relations, matrices = [], {}
        for r in doc["relations"]:
            rel = RelationSpec(str(r["id"]), ref(r["row_type"]), ref(r["col_type"]), r["family"])
            relations.append(rel)
            if r.get("data_path") is not None:
                matrices[rel.id] = read_triplets(
                    path.parent / r["data_path"], rel.id,
                    shift=float(r.get("shift", 0.0)), scale=float(r.get("scale", 1.0)))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing or malformed field {exc}") from None
    return RelationalSchema(types, relations, matrices)


def save_schema(schema: RelationalSchema, directory, filename="schema.json") -> Path:
    """Write ``schema.json`` plus one ``<relation>.csv`` per relation."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {t.id: t.name for t in schema.entity_types}
    rels = []
    for rel in schema.relations:
        entry = {"id": rel.id, "row_type": names.get(rel.row_type, rel.row_type),
                 "col_type": names.get(rel.col_type, rel.col_type),
                 "family": rel.family.value}
        mat = schema.matrices.get(rel.id)
        if mat is not None:
            entry["data_path"] = f"{rel.id}.csv"
            if mat.shift != 0.0 or mat.scale != 1.0:
                entry["shift"] = mat.shift
                entry["scale"] = mat.scale
            write_triplets(directory / entry["data_path"], mat)
        rels.append(entry)
    doc = {"entity_types": [{"name": t.name, "count": t.count} for t in schema.entity_types],
           "relations": rels}
    out = directory / filename
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out
