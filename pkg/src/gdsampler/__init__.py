"""Exact independent posterior sampling for hierarchical models by
generalized direct sampling, with sparse Hessians and sparse Cholesky."""

from .gds_core import (
    GdsConfig,
    GdsRun,
    InvalidProposal,
    ProposalCapExceeded,
    QvEstimate,
    ScaleSearchFailed,
    auto_scale,
    estimate_qv,
    load_run,
    rejection_sample_one,
    run,
    sample_threshold,
    sample_thresholds,
)
from .marglik import MarglikEstimate, estimate_log_ml, harmonic_mean_log_ml, marglik_study
from .mode_finder import ModeFindingError, ModeOptions, ModeResult, find_mode, hessian_at_mode
from .model import (
    HierarchicalModel,
    ModelA,
    ModelB,
    ModelC,
    NormalMeanModel,
    make_model_a,
    make_model_b,
    make_model_c,
    make_normal_mean_model,
    model_c_log_marglik,
)
from .proposal import Proposal, build_proposal, log_phi
from .sparse_linalg import (
    CholFactor,
    Coloring,
    NotPositiveDefinite,
    SparseSymMatrix,
    SparsityPattern,
    block_arrow_pattern,
    cholesky,
    color_pattern,
    fd_hessian,
    solve_lt,
)

__version__ = "0.1.0"
