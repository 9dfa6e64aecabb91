"""Toroidal probabilistic spherical discriminant analysis (T-PSDA) for unit-norm embeddings."""

from .model import ModelStructure, TPsdaModel, log_marginal, make_cosine_equivalent, validate
from .scoring import llr, llr_approx, score_matrix, summarize_side
from .train import EmConfig, fit

__all__ = [
    "EmConfig",
    "ModelStructure",
    "TPsdaModel",
    "fit",
    "llr",
    "llr_approx",
    "log_marginal",
    "make_cosine_equivalent",
    "score_matrix",
    "summarize_side",
    "validate",
]
