"""Task-relatedness: an upper bound on linear-probe transferability between
embedding datasets, learned by transforming a labelled reference task."""

__version__ = "0.1.0"

from .classifier import (
    SoftmaxClassifier,
    TrainConfig,
    accuracy,
    average_loss,
    reweighted_loss,
    train_lipschitz_softmax,
)
from .dataset import (
    EmbeddingDataset,
    empirical_prior,
    load_dataset,
    save_dataset,
    standardize,
    subsample_by_prior,
    subsample_classes,
)
from .errors import DivergenceError, InfeasibleError, InputError, TaskRelError
from .fast import FastReport, fast_task_relatedness, gamma_distance, moment_stats
from .harness import TransferRecord, emit_report, pearson_correlation, rank_models
from .optimizer import Alg1Config, BoundTrace, alg1_minimize
from .transforms import BoundReport, TransformSet, evaluate_bound, transformed_classifier
from .transport import exact_ot, joint_wasserstein, sinkhorn

__all__ = [
    "Alg1Config", "BoundReport", "BoundTrace", "DivergenceError", "EmbeddingDataset",
    "FastReport", "InfeasibleError", "InputError", "SoftmaxClassifier", "TaskRelError",
    "TrainConfig", "TransferRecord", "TransformSet", "accuracy", "alg1_minimize",
    "average_loss", "emit_report", "empirical_prior", "evaluate_bound", "exact_ot",
    "fast_task_relatedness", "gamma_distance", "joint_wasserstein", "load_dataset",
    "moment_stats", "pearson_correlation", "rank_models", "reweighted_loss", "save_dataset",
    "sinkhorn", "standardize", "subsample_by_prior", "subsample_classes",
    "train_lipschitz_softmax", "transformed_classifier",
]
