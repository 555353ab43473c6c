"""Source-invariant representation learning via adversarial penalization,
with a synthetic multi-source benchmark, AUC evaluation, and Grad-CAM
attribution."""

from .autodiff import Graph, Tensor, backward, gradient_reversal
from .estimator import SourceInvariantClassifier
from .evaluation import EvalReport, ScoredSet, auc_roc
from .training import TrainConfig

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "gradient_reversal",
    "SourceInvariantClassifier",
    "EvalReport",
    "ScoredSet",
    "auc_roc",
    "TrainConfig",
]

__version__ = "0.1.0"
