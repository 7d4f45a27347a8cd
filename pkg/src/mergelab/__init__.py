"""mergelab: a desk-scale model-merging laboratory.

Trains small expert networks on synthetic tasks, merges them statically
(weight averaging, task addition, sign-resolved trim-and-merge) or
dynamically per sample, and measures how well the merged model tracks the
matching expert's representations.
"""

from .core import (
    ActivationVector,
    ParamVector,
    TaskVector,
    axpy,
    cosine_distance,
    l1_distance,
    l2_distance,
    minmax_normalize,
    softmax,
)
from .datasets import TaskDataset, TaskSuite, generate_suite
from .merging import MergeConfig, task_arithmetic, task_vector, ties_merge, weight_average
from .model import ModelSpec, backward, forward, forward_traced, init_params
from .se_merging import (
    SimilarityReport,
    compute_similarity,
    rescale_coefficients,
    se_evaluate,
    se_infer,
)
from .training import TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "ActivationVector",
    "MergeConfig",
    "ModelSpec",
    "ParamVector",
    "SimilarityReport",
    "TaskDataset",
    "TaskSuite",
    "TaskVector",
    "TrainConfig",
    "axpy",
    "backward",
    "compute_similarity",
    "cosine_distance",
    "finetune",
    "forward",
    "forward_traced",
    "generate_suite",
    "init_params",
    "l1_distance",
    "l2_distance",
    "minmax_normalize",
    "pretrain",
    "rescale_coefficients",
    "se_evaluate",
    "se_infer",
    "softmax",
    "task_arithmetic",
    "task_vector",
    "ties_merge",
    "weight_average",
]
