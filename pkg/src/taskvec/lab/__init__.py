"""Evaluation lab: checkpoint zoo, metrics, experiment protocols and reports."""

from .experiments import (
    EXPERIMENTS,
    run_addition,
    run_analogy_grid,
    run_cosine,
    run_domain_generalization,
    run_ensemble_study,
    run_forgetting,
    run_lr_seed_study,
    run_trajectory,
)
from .metrics import accuracy, cosine_matrix, ensemble_accuracy, normalized_accuracy, pearson, spearman
from .report import EvalReport, ReportRow
from .zoo import LabConfig, Zoo

__all__ = [
    "EXPERIMENTS", "EvalReport", "LabConfig", "ReportRow", "Zoo", "accuracy", "cosine_matrix",
    "ensemble_accuracy", "normalized_accuracy", "pearson", "run_addition", "run_analogy_grid",
    "run_cosine", "run_domain_generalization", "run_ensemble_study", "run_forgetting",
    "run_lr_seed_study", "run_trajectory", "spearman",
]
