"""Command-line entry point: ``hbcmf synth | fit | predict | eval``.

Every command writes a ``manifest.json`` with the seed, the resolved
configuration and its hash, and the package version, which is enough to
re-run it.  Exit codes: 0 success, 1 numerical or training failure, 2 usage
or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, parallel
from .exceptions import NumericalError, StateError
from .hmh import ChainConfig, load_chain, run_chain, save_chain
from .map_engine import MapConfig, fit_map, psychic_priors
from .predict import (FoldinConfig, PredictionRequest, fold_in, holdout_split, predict_bayes,
                      predict_point, prediction_records, read_predictions, summarize,
                      write_predictions, write_summary)
from .schema import (ObservedMatrix, format_float, load_schema, read_triplets, remodel, require_valid,
                     restrict, save_schema, write_triplets)
from .state import load_checkpoint, save_checkpoint
from .synth import RelationSynth, SynthSpec, generate

logger = logging.getLogger("hbcmf")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
METHODS = ("cmf", "hcmf", "hbcmf")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


@dataclass
class RunConfig:
    schema: str | None = None
    method: str = "hbcmf"
    seed: int = 0
    k: int = 25
    # MAP
    max_sweeps: int = 200
    rel_tol: float = 1e-6
    max_newton_halvings: int = 20
    # sampler
    epochs: int = 300
    burn_in: int = 50
    thin: int = 5
    samples: int = 20
    eta: float | None = None
    refresh_proposals: bool = True
    # fold-in
    samples_per_state: int = 5
    foldin_burn_in: int = 20
    foldin_thin: int = 2
    observed_fraction: float = 2.0 / 3.0
    posterior_states_used: int = 10
    # data handling
    psychic_reference: str | None = None
    holdout: dict | None = None  # {"relation": id, "fraction": f}
    relations: list | None = None  # keep only these relations
    families: dict = field(default_factory=dict)  # relation id -> family override

    def validate(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.psychic_reference and self.method != "cmf":
            raise UsageError("psychic_reference applies to method 'cmf' only")
        if self.holdout is not None and "relation" not in self.holdout:
            raise UsageError("holdout needs a 'relation'")
        return self

    def map_config(self, threads=1) -> MapConfig:
        return MapConfig(k=self.k, max_sweeps=self.max_sweeps, rel_tol=self.rel_tol,
                         hierarchical=self.method == "hcmf",
                         max_newton_halvings=self.max_newton_halvings, seed=self.seed,
                         threads=threads)

    def chain_config(self, threads=1) -> ChainConfig:
        return ChainConfig(k=self.k, epochs=self.epochs, burn_in=self.burn_in, thin=self.thin,
                           samples=self.samples, seed=self.seed, eta=self.eta,
                           refresh_proposals=self.refresh_proposals, threads=threads)

    def foldin_config(self) -> FoldinConfig:
        return FoldinConfig(self.samples_per_state, self.foldin_burn_in, self.foldin_thin,
                            self.observed_fraction, self.posterior_states_used)


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def load_run_config(path=None, **overrides) -> RunConfig:
    doc = _read_json(path) if path else {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"unknown config field(s): {', '.join(unknown)}")
    cfg = RunConfig(**doc)
    if cfg.schema and path and not Path(cfg.schema).is_absolute() and "schema" not in overrides:
        cfg.schema = str(Path(path).parent / cfg.schema)
    return cfg.validate()


def _manifest(out: Path, command: str, seed, config: dict, **extra):
    doc = {"command": command, "version": __version__, "seed": seed, "config": config,
           "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()}
    doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


# -- synth ------------------------------------------------------------------

def _parse_densities(items):
    out = {}
    for item in items or []:
        rid, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--density expects RELATION=VALUE, got {item!r}")
        try:
            out[rid] = float(value)
        except ValueError:
            raise UsageError(f"--density {item!r}: not a number") from None
    return out


def _synth_spec(args) -> SynthSpec:
    densities = _parse_densities(args.density)
    if args.fixture:
        if args.fixture != "three-type":
            raise UsageError(f"unknown fixture {args.fixture!r}")
        unknown = set(densities) - {"X", "Y"}
        if unknown:
            raise UsageError(f"fixture has no relation(s) {sorted(unknown)}")
        doc = {"entity_types": [["word", 400], ["stimulus", 60], ["voxel", 100]],
               "relations": [{"id": "X", "row_type": "word", "col_type": "stimulus",
                              "family": "bernoulli", "density": 0.3},
                             {"id": "Y", "row_type": "stimulus", "col_type": "voxel",
                              "family": "gaussian", "density": 0.3}]}
    elif args.config:
        doc = _read_json(args.config)
    else:
        raise UsageError("synth needs --fixture or --config")
    try:
        types = [(t["name"], int(t["count"])) if isinstance(t, dict) else (t[0], int(t[1]))
                 for t in doc["entity_types"]]
        rels = [RelationSynth(r["id"], r["row_type"], r["col_type"], r.get("family", "gaussian"),
                              float(densities.get(r["id"], r.get("density", 1.0))))
                for r in doc["relations"]]
    except (KeyError, TypeError, IndexError) as exc:
        raise UsageError(f"malformed synth config: {exc}") from None
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    return SynthSpec(types, rels, k_true=int(doc.get("k_true", 5)), noise=float(doc.get("noise", 1.0)),
                     seed=seed, standardize=bool(doc.get("standardize", True)))


def cmd_synth(args) -> int:
    spec = _synth_spec(args)
    spec.validate()
    out = _out_dir(args.out)
    schema, truth = generate(spec)
    require_valid(schema)
    save_schema(schema, out / "data")
    save_checkpoint(truth, out / "truth", schema_hash=schema.fingerprint(), seed=spec.seed)
    config = asdict(spec)
    config["relations"] = [asdict(r) for r in spec.relations]
    _manifest(out, "synth", spec.seed, config, fixture=args.fixture,
              schema_hash=schema.fingerprint())
    print(out / "data" / "schema.json")
    return EXIT_OK


# -- fit --------------------------------------------------------------------

def _load_training_schema(cfg: RunConfig):
    if not cfg.schema:
        raise UsageError("no schema given (set 'schema' in the config or pass --schema)")
    schema = load_schema(cfg.schema)
    if cfg.relations:
        schema = restrict(schema, cfg.relations)
    for rid, fam in sorted(cfg.families.items()):
        schema = remodel(schema, rid, fam)
    return require_valid(schema)


def _load_state_source(path):
    """A MAP checkpoint or a chain, from its directory or a fit output directory."""
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    for cand in (path, path / "chain", path / "checkpoint"):
        if (cand / "chain.json").exists():
            return load_chain(cand)
        if (cand / "metadata.json").exists():
            return load_checkpoint(cand)[0]
    raise StateError(f"checkpoint not found: {path}")


def write_trace(path, label, values):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", label))
        for i, v in enumerate(values, start=1):
            w.writerow((i, format_float(v)))


def cmd_fit(args) -> int:
    cfg = load_run_config(args.config, schema=args.schema, method=args.method, seed=args.seed)
    threads = args.threads
    out = _out_dir(args.out)
    schema = _load_training_schema(cfg)
    extra = {"threads": threads}

    if cfg.holdout is not None:
        rid = cfg.holdout["relation"]
        schema, test = holdout_split(schema, rid, float(cfg.holdout.get("fraction", 0.1)),
                                     parallel.stream(cfg.seed, parallel.SPLIT))
        test_raw = ObservedMatrix(test.relation, test.rows, test.cols, test.to_raw())
        write_triplets(out / f"holdout_{rid}.csv", test_raw)
        extra["holdout_targets"] = f"holdout_{rid}.csv"
    schema_hash = schema.fingerprint()

    if cfg.method == "hbcmf":
        chain = run_chain(schema, cfg.chain_config(threads))
        save_chain(chain, out / "chain", schema_hash)
        write_trace(out / "trace.csv", "energy", chain.energy)
        extra["acceptance_rate"] = chain.acceptance_rate(cfg.burn_in).tolist()
        extra["retained_samples"] = len(chain.samples)
    else:
        fixed = None
        if cfg.psychic_reference:
            ref = _load_state_source(cfg.psychic_reference)
            if not hasattr(ref, "factors"):
                raise UsageError("psychic_reference must be a MAP checkpoint")
            fixed = psychic_priors(ref)
            extra["psychic_sigma_diagonal"] = [np.diag(s).tolist() for _, s in fixed]
        state, trace = fit_map(schema, cfg.map_config(threads), fixed_priors=fixed)
        save_checkpoint(state, out / "checkpoint", schema_hash, cfg.seed)
        write_trace(out / "trace.csv", "objective", trace)
        extra["sweeps"] = len(trace)
    _manifest(out, "fit", cfg.seed, asdict(cfg), schema_hash=schema_hash, **extra)
    return EXIT_OK


# -- predict ----------------------------------------------------------------

def _state_of(source):
    return source if hasattr(source, "factors") else source.samples[0]


def cmd_predict(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    if args.checkpoint is None or args.targets is None or args.relation is None:
        raise UsageError("predict needs --checkpoint, --targets and --relation")
    source = _load_state_source(args.checkpoint)
    state = _state_of(source)
    try:
        rel = state.relation(args.relation)
    except KeyError:
        raise UsageError(f"checkpoint has no relation {args.relation!r}") from None
    if not Path(args.targets).exists():
        raise UsageError(f"targets file not found: {args.targets}")
    targets = read_triplets(args.targets, args.relation)
    out = _out_dir(args.out)
    transform = state.transforms.get(rel.id)
    extra = {"mode": args.mode, "checkpoint": str(args.checkpoint), "targets": str(args.targets)}

    if args.mode == "holdout":
        request = PredictionRequest(rel.id, np.stack([targets.rows, targets.cols], axis=1))
        preds = predict_point(source, request) if hasattr(source, "factors") \
            else predict_bayes(source, request)
        records = prediction_records(rel.id, request.targets, preds, targets.values, transform)
    else:
        n_rows = len(state.factors[rel.row_type - 1])
        n_cols = len(state.factors[rel.col_type - 1])
        records, samples = [], {}
        new_rows = np.unique(targets.rows[targets.rows >= n_rows])
        new_cols = np.unique(targets.cols[targets.cols >= n_cols])
        if new_rows.size and new_cols.size:
            raise UsageError("fold-in targets introduce new entities on both sides")
        if not new_rows.size and not new_cols.size:
            raise UsageError("fold-in targets contain no new entity (index beyond the trained range)")
        side, new = ("row", new_rows) if new_rows.size else ("col", new_cols)
        own, other = (targets.rows, targets.cols) if side == "row" else (targets.cols, targets.rows)
        for i, idx in enumerate(new.tolist()):
            sel = own == idx
            res = fold_in(source, rel.id, (other[sel], targets.values[sel]), cfg.foldin_config(),
                          parallel.stream(cfg.seed, parallel.FOLDIN, i), side)
            pairs = [(idx, j) if side == "row" else (j, idx) for j in res.evaluation.tolist()]
            records += prediction_records(rel.id, pairs, res.predictions, res.actual, transform)
            samples[str(idx + 1)] = res.row_samples
        extra["row_samples"] = samples
        extra["foldin_side"] = side

    write_predictions(out / "predictions.csv", records)
    summary = summarize(records)
    write_summary(out / "summary.json", summary)
    _manifest(out, "predict", cfg.seed, asdict(cfg), **extra)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    if args.predictions is None:
        raise UsageError("eval needs --predictions")
    path = Path(args.predictions)
    if not path.exists():
        raise UsageError(f"predictions file not found: {path}")
    summary = summarize(read_predictions(path))
    if args.out:
        out = _out_dir(args.out)
        write_summary(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hbcmf", description="Collective matrix factorization "
                                     "with hierarchical priors and Bayesian sampling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset and its ground truth")
    common(p)
    p.add_argument("--fixture", help="named fixture (three-type)")
    p.add_argument("--density", action="append", metavar="REL=VALUE",
                   help="override a relation's observation density; repeatable")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train CMF / H-CMF (MAP) or HB-CMF (sampler)")
    common(p)
    p.add_argument("--schema", help="schema JSON (overrides the config)")
    p.add_argument("--method", choices=METHODS, help="model (overrides the config)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="hold-out or fold-in prediction from a checkpoint or chain")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint, chain, or fit output directory")
    p.add_argument("--targets", help="triplet CSV (1-based row,col,value)")
    p.add_argument("--relation", help="relation id of the targets")
    p.add_argument("--mode", choices=("holdout", "foldin"), default="holdout")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mean squared error per relation from a predictions CSV")
    common(p)
    p.add_argument("--predictions", help="predictions CSV")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("hbcmf: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"hbcmf: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, StateError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"hbcmf: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
