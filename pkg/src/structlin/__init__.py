"""Structured replacements for dense linear layers.

Families: dense, low-rank, circular convolution, Kronecker, Monarch,
tensor-train and block tensor-train. Each one multiplies without forming
the dense matrix, reports exact FLOP and parameter counts, and comes with a
structure-aware muP plan for initialization and learning rates.
"""
from .accounting import CostReport, cost, measured_flops
from .analysis import PowerLawFit, fit_power_law
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    InsufficientDataError,
    NumericalError,
    ResourceError,
    StructlinError,
)
from .mup import MuPPlan, dense_mup_init_std, initialize, plan, transfer_lr
from .projection import btt_rank_bound, project_btt_2core, project_btt_recursive, tt_rank_bound
from .structures import (
    FAMILIES,
    BlockTensorTrain,
    Convolution,
    Dense,
    Kronecker,
    LowRank,
    Monarch,
    StructuredMatrix,
    TensorTrain,
    build,
)

__version__ = "0.1.0"
