"""Lossless orthogonalization of attention projection pairs.

Per attention head the query/key and value/output projections multiply
into low-rank matrices whose rank is bounded by the head dimension.
Decomposing those products yields frozen orthonormal bases and small
singular-value cores: near-zero directions prune away without training,
and fine-tuning touches the cores only (upper-triangular query/key
factors when rotary embeddings sit between the projections). Everything
is verifiable end-to-end against the built-in plain attention forward.
"""

from .attention import (
    AttentionWeights,
    CloverFactors,
    RopeSpec,
    mha_forward,
    mha_forward_factored,
    rope_apply,
)
from .estimators import CloverFineTuner, CloverOrthogonalizer
from .exceptions import (
    ArchiveError,
    CloverError,
    ConvergenceError,
    MaskError,
    ShapeError,
    TrainingDivergedError,
)
from .finetune import (
    Batch,
    ToyTask,
    TrainState,
    factored_backward,
    factored_forward_cached,
    finite_diff_check,
    make_toy_task,
    train_toy,
)
from .linalg import (
    QRFactors,
    SVDFactors,
    householder_qr,
    jacobi_svd,
    orthonormality_error,
    product_svd,
)
from .masks import MaskSpec
from .rng import make_rng
from .synth import low_rank_weights, random_inputs, random_weights
from .tensor import matmul, softmax_rows
from .transform import (
    ParamReport,
    PruneStats,
    SpectrumReport,
    absorb_qk,
    absorb_vo,
    count_params,
    decompose_factors,
    merge_back,
    prune_factors,
    spectrum_report,
    vanilla_prune,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights",
    "ArchiveError",
    "Batch",
    "CloverError",
    "CloverFactors",
    "CloverFineTuner",
    "CloverOrthogonalizer",
    "ConvergenceError",
    "MaskError",
    "MaskSpec",
    "ParamReport",
    "PruneStats",
    "QRFactors",
    "RopeSpec",
    "SVDFactors",
    "ShapeError",
    "SpectrumReport",
    "ToyTask",
    "TrainState",
    "TrainingDivergedError",
    "absorb_qk",
    "absorb_vo",
    "count_params",
    "decompose_factors",
    "factored_backward",
    "factored_forward_cached",
    "finite_diff_check",
    "householder_qr",
    "jacobi_svd",
    "low_rank_weights",
    "make_rng",
    "make_toy_task",
    "matmul",
    "merge_back",
    "mha_forward",
    "mha_forward_factored",
    "orthonormality_error",
    "product_svd",
    "prune_factors",
    "random_inputs",
    "random_weights",
    "rope_apply",
    "softmax_rows",
    "spectrum_report",
    "train_toy",
    "vanilla_prune",
    "__version__",
]
