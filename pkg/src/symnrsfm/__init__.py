"""Symmetric non-rigid structure from motion from 2D keypoint-pair
annotations: EM fitting of a symmetric mean-shape model, prior-free
symmetric factorization, synthetic scene generation and evaluation
metrics."""

from .core import (
    CameraPose,
    DegenerateInputError,
    FitReport,
    IllPosedError,
    InfeasibleError,
    MeanShapeModel,
    ObservationSet,
    PerImageShapeSet,
    PosteriorStats,
    SymmetryOp,
    center_observations,
    observations_from_projections,
    rearrange_compact,
    reflect_shape,
    restore_stacked,
    stack_model,
)
from .em_ppca import EmConfig, fit_em_ppca, fit_sym_em_ppca
from .estimators import EMPPCA, PriorFree, SymEMPPCA, SymPriorFree
from .evaluation import (
    ErrorReport,
    evaluate,
    normalize_shape,
    rotation_error,
    run_noise_sweep,
    shape_error,
)
from .numerics import (
    GramSolution,
    SolverConfig,
    nuclear_min_structure,
    nullspace,
    procrustes_rotation,
    project_row_orthonormal,
    solve_gram_sdp,
    truncated_factorization,
)
from .priorfree import (
    DecoupledPair,
    PriorFreeConfig,
    build_orthonormality_system,
    coordinate_descent_refine,
    decouple,
    factorize_decoupled,
    fit_priorfree,
    fit_sym_priorfree,
    recover_cameras,
)
from .rigid import RigidInitResult, init_missing_rank3, sym_rigid_sfm
from .synth import SynthConfig, add_noise, apply_occlusion, generate_scene

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "DecoupledPair",
    "DegenerateInputError",
    "EMPPCA",
    "EmConfig",
    "ErrorReport",
    "FitReport",
    "GramSolution",
    "IllPosedError",
    "InfeasibleError",
    "MeanShapeModel",
    "ObservationSet",
    "PerImageShapeSet",
    "PosteriorStats",
    "PriorFree",
    "PriorFreeConfig",
    "RigidInitResult",
    "SolverConfig",
    "SymEMPPCA",
    "SymPriorFree",
    "SymmetryOp",
    "SynthConfig",
    "add_noise",
    "apply_occlusion",
    "build_orthonormality_system",
    "center_observations",
    "coordinate_descent_refine",
    "decouple",
    "evaluate",
    "factorize_decoupled",
    "fit_em_ppca",
    "fit_priorfree",
    "fit_sym_em_ppca",
    "fit_sym_priorfree",
    "generate_scene",
    "init_missing_rank3",
    "normalize_shape",
    "nuclear_min_structure",
    "nullspace",
    "observations_from_projections",
    "procrustes_rotation",
    "project_row_orthonormal",
    "rearrange_compact",
    "recover_cameras",
    "reflect_shape",
    "restore_stacked",
    "rotation_error",
    "run_noise_sweep",
    "shape_error",
    "solve_gram_sdp",
    "stack_model",
    "sym_rigid_sfm",
    "truncated_factorization",
]
