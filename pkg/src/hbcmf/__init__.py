"""Collective matrix factorization with hierarchical priors and Bayesian inference.

Relations between entity types are modeled as exponential-family matrices
whose natural parameters are inner products of shared per-type latent
factors.  Training is available as MAP (CMF, H-CMF) or as a block
Metropolis-Hastings sampler with Hessian-based proposals (HB-CMF).
"""

__version__ = "0.1.0"

from .exceptions import (DomainError, HbcmfError, NumericalError, RequestError, SchemaError,
                         StateError, TrainingError)
from .expfam import Family
from .hmh import ChainConfig, PosteriorChain, hmh_row_step, load_chain, run_chain, save_chain
from .map_engine import MapConfig, fit_map, psychic_priors
from .niw import NiwHyperprior, niw_posterior, sample_niw, sample_wishart
from .predict import (FoldinConfig, PredictionRequest, evaluate_mse, fold_in, holdout_split,
                      predict_bayes, predict_point)
from .row_glm import ObservationBlock, RowContext, newton_step, row_gradient, row_hessian, row_negloglik
from .schema import (EntityType, ObservedMatrix, RelationalSchema, RelationSpec, load_schema,
                     save_schema, validate_schema)
from .state import ModelState, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate, three_type_fixture

__all__ = [
    "ChainConfig", "DomainError", "EntityType", "Family", "FoldinConfig", "HbcmfError", "MapConfig",
    "ModelState", "NiwHyperprior", "NumericalError", "ObservationBlock", "ObservedMatrix",
    "PosteriorChain", "PredictionRequest", "RelationSpec", "RelationalSchema", "RequestError",
    "RowContext", "SchemaError", "StateError", "SynthSpec", "TrainingError", "evaluate_mse",
    "fit_map", "fold_in", "generate", "hmh_row_step", "holdout_split", "load_chain",
    "load_checkpoint", "load_schema", "newton_step", "niw_posterior", "predict_bayes",
    "predict_point", "psychic_priors", "row_gradient", "row_hessian", "row_negloglik", "run_chain",
    "sample_niw", "sample_wishart", "save_chain", "save_checkpoint", "save_schema",
    "three_type_fixture", "validate_schema",
]
