"""Counterfactual visual explanations for CNN classifiers.

Given a trained classifier split into a spatial feature extractor and a
decision head, this package finds the minimal sequence of feature-cell edits
(copying cells from a distractor image into a query image) that flips the
model's decision to the distractor's class, and renders those edits back to
pixel space via receptive fields.
"""

from .grids import AlignmentMatrix, EditList, FeatureGrid, GateVector, apply_edits, extract_edit_set, single_edit
from .network import (
    LayerSpec,
    LogProbVector,
    ModelBundle,
    TrainConfig,
    forward_features,
    full_logprobs,
    head_input_gradient,
    head_logprobs,
    load_model,
    reference_extractor_specs,
    reference_head_specs,
    save_model,
    train,
)
from .relaxed import RelaxOptConfig, best_edit_relaxed, entropy_penalty, softmax
from .search import ExplanationResult, SearchConfig, best_edit_exhaustive, greedy_counterfactual

__all__ = [
    "AlignmentMatrix",
    "EditList",
    "ExplanationResult",
    "FeatureGrid",
    "GateVector",
    "LayerSpec",
    "LogProbVector",
    "ModelBundle",
    "RelaxOptConfig",
    "SearchConfig",
    "TrainConfig",
    "apply_edits",
    "best_edit_exhaustive",
    "best_edit_relaxed",
    "entropy_penalty",
    "extract_edit_set",
    "forward_features",
    "full_logprobs",
    "greedy_counterfactual",
    "head_input_gradient",
    "head_logprobs",
    "load_model",
    "reference_extractor_specs",
    "reference_head_specs",
    "save_model",
    "single_edit",
    "softmax",
    "train",
]
