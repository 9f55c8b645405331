"""Compact embeddings from large ones: classical reduction, pruning,
teacher-student distillation and projection-head retraining, plus retrieval
evaluation (MAP, MR1) and a brute-force latency benchmark."""

from .data import (
    BatchSpec, EmbeddingSet, SynthConfig, generate_synthetic, generate_transposition_task,
    load_embeddings, preset, sample_batch, save_embeddings,
)
from .errors import (
    ConfigError, ContractError, DegenerateInputError, DimensionError, EmbDistillError,
    EvaluationError, FormatError, GridSearchError, PruneStateError, SamplingError,
    TrainingDivergedError,
)
from .pruning import PruneState, prune_step, run_pruning
from .reduction import NonConvergence, Reducer, fit_grp, fit_ica, fit_pca, inverse_transform, transform
from .retrieval import RetrievalReport, average_precision, bench_retrieval, evaluate, pairwise_distances
from .trainer import (
    ProjectionHead, RandomExtractor, TrainConfig, grid_search, lr_schedule, reconfigure, train,
)

__version__ = "0.1.0"

__all__ = [
    "BatchSpec", "ConfigError", "ContractError", "DegenerateInputError", "DimensionError",
    "EmbDistillError", "EmbeddingSet", "EvaluationError", "FormatError", "GridSearchError",
    "NonConvergence", "ProjectionHead", "PruneState", "PruneStateError", "RandomExtractor", "Reducer",
    "RetrievalReport", "SamplingError", "SynthConfig", "TrainConfig", "TrainingDivergedError",
    "average_precision", "bench_retrieval", "evaluate", "fit_grp", "fit_ica", "fit_pca",
    "generate_synthetic", "generate_transposition_task", "grid_search", "inverse_transform",
    "load_embeddings", "lr_schedule", "pairwise_distances", "preset", "prune_step", "reconfigure",
    "run_pruning", "sample_batch", "save_embeddings", "train", "transform",
]
