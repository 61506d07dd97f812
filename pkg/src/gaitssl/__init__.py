"""Self-supervised gait representation learning on synthetic cohorts.

A causal decoder-only transformer trained with a temporal-crop contrastive
loss plus an optional next-timestep prediction loss, evaluated with
L1-regularized linear probes under nested subject-level cross-validation,
and analyzed via embedding-space biomarkers (similarity matrices,
geometric-median control reference, longitudinal response series).
"""

from .data import (
    JOINT_CHANNELS,
    WINDOW_LEN,
    Diagnosis,
    FoldSplit,
    GaitTrial,
    Laterality,
    NormStats,
    Subject,
    TrialWindow,
    center_window,
    compute_norm_stats,
    load_dataset,
    make_subject_folds,
    sample_positive_pair,
    save_dataset,
)
from .errors import ConfigError, DataError, GaitSslError, NumericalError
from .model import Checkpoint, ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .probe import PROBE_TASKS, EmbeddingRecord, embed_dataset, fit_l1_logistic, nested_cv_probe
from .biomarker import geometric_median, response_series, similarity_matrix
from .synth import CohortSpec, generate_cohort
from .training import TrainConfig, contrastive_loss, prediction_loss, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "JOINT_CHANNELS",
    "WINDOW_LEN",
    "Diagnosis",
    "Laterality",
    "Subject",
    "GaitTrial",
    "TrialWindow",
    "NormStats",
    "FoldSplit",
    "CohortSpec",
    "ModelConfig",
    "TrainConfig",
    "Checkpoint",
    "EmbeddingRecord",
    "PROBE_TASKS",
    "GaitSslError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "load_dataset",
    "save_dataset",
    "compute_norm_stats",
    "sample_positive_pair",
    "center_window",
    "make_subject_folds",
    "generate_cohort",
    "init_params",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "contrastive_loss",
    "prediction_loss",
    "total_loss",
    "train",
    "embed_dataset",
    "fit_l1_logistic",
    "nested_cv_probe",
    "similarity_matrix",
    "geometric_median",
    "response_series",
    "__version__",
]
