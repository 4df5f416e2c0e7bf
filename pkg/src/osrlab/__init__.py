"""Open set recognition laboratory.

Synthetic shape protocols, a small from-scratch convolutional network with
manual backpropagation, supervised contrastive training with closed-form
pair gradients, outlier scoring (max softmax probability, Mahalanobis
distance, feature norm) with multi-model aggregation, rank-exact evaluation
metrics, and an experiment harness that reproduces the controlled studies.
"""

from .errors import (
    DatasetFormatError,
    EmbeddingFormatError,
    ModelIOError,
    OsrlabError,
    TrainingDiverged,
)
from .harness import ExperimentConfig, ResultRow, ResultTable, build_config
from .metrics import EvaluationRecord, accuracy, auroc, openness, oscr
from .nn import (
    ModelParams,
    NetworkConfig,
    TrainConfig,
    extract_representation,
    finetune_frozen,
    load_params,
    predict,
    save_params,
    train_classifier,
)
from .osr import (
    EmbeddingBatch,
    GaussianModel,
    ScoreSet,
    aggregate,
    fit_gaussian_model,
    knn_classify,
    read_embeddings,
    score_mahalanobis,
    score_msp,
    score_norm,
    write_embeddings,
)
from .supcon import (
    AugmentPolicy,
    ContrastiveBatch,
    simulate_gradient_curves,
    supcon_loss,
    supcon_pair_gradients,
    train_supcon,
)
from .synthdata import LabeledDataset, generate_outline_set, generate_protocol, load_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "ContrastiveBatch",
    "DatasetFormatError",
    "EmbeddingBatch",
    "EmbeddingFormatError",
    "EvaluationRecord",
    "ExperimentConfig",
    "GaussianModel",
    "LabeledDataset",
    "ModelIOError",
    "ModelParams",
    "NetworkConfig",
    "OsrlabError",
    "ResultRow",
    "ResultTable",
    "ScoreSet",
    "TrainConfig",
    "TrainingDiverged",
    "accuracy",
    "aggregate",
    "auroc",
    "build_config",
    "extract_representation",
    "finetune_frozen",
    "fit_gaussian_model",
    "generate_outline_set",
    "generate_protocol",
    "knn_classify",
    "load_dataset",
    "load_params",
    "openness",
    "oscr",
    "predict",
    "read_embeddings",
    "save_params",
    "score_mahalanobis",
    "score_msp",
    "score_norm",
    "simulate_gradient_curves",
    "supcon_loss",
    "supcon_pair_gradients",
    "train_classifier",
    "train_supcon",
    "write_dataset",
    "write_embeddings",
]
