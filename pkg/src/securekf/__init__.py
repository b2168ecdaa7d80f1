"""Secure state estimation for linear Gaussian systems under sparse sensor attacks."""

from .decomposition import (
    SensorDecomposition,
    build_decomposition,
    canonical_projector,
    fusion_weights,
    local_gain_direct,
    local_gain_factored,
    mtilde_solve,
    residual_covariances,
)
from .fusion import (
    FusionProblem,
    FusionResult,
    LocalBankState,
    assemble_canonical_measurement,
    build_fusion_problem,
    empirical_equivalence_probability,
    fusion_objective,
    initial_bank,
    kalman_equivalence_condition,
    local_estimator_step,
    secure_fuse,
    weighted_least_squares,
)
from .simulator import (
    AttackSpec,
    MseReport,
    SecurityGap,
    SimulationTrace,
    SweepRow,
    attack_sequence,
    default_attack,
    mse,
    security_gap,
    simulate,
    sweep_attack_magnitude,
    sweep_csv,
    sweep_gamma,
    trace_csv,
    write_sweep_csv,
    write_trace_csv,
)
from .spectral import (
    RiccatiDivergenceError,
    SpectralDesign,
    characteristic_polynomial,
    closed_loop_eigendecomposition,
    fixed_gain_kalman_step,
    spectral_design,
    steady_state_kalman,
)
from .model import (
    ModelFormatError,
    ObservabilityStructure,
    ResilienceCertificate,
    SystemModel,
    ValidationReport,
    brute_force_sparse_index,
    certify_resilience,
    load_model,
    observability_structure,
    psd_factor,
    validate_model,
)

__all__ = [
    "AttackSpec",
    "FusionProblem",
    "FusionResult",
    "LocalBankState",
    "ModelFormatError",
    "MseReport",
    "ObservabilityStructure",
    "ResilienceCertificate",
    "RiccatiDivergenceError",
    "SecurityGap",
    "SensorDecomposition",
    "SimulationTrace",
    "SpectralDesign",
    "SweepRow",
    "SystemModel",
    "ValidationReport",
    "assemble_canonical_measurement",
    "attack_sequence",
    "brute_force_sparse_index",
    "build_decomposition",
    "build_fusion_problem",
    "canonical_projector",
    "certify_resilience",
    "characteristic_polynomial",
    "closed_loop_eigendecomposition",
    "default_attack",
    "empirical_equivalence_probability",
    "fixed_gain_kalman_step",
    "fusion_objective",
    "fusion_weights",
    "initial_bank",
    "kalman_equivalence_condition",
    "load_model",
    "local_estimator_step",
    "local_gain_direct",
    "local_gain_factored",
    "mse",
    "mtilde_solve",
    "observability_structure",
    "psd_factor",
    "residual_covariances",
    "secure_fuse",
    "security_gap",
    "simulate",
    "spectral_design",
    "steady_state_kalman",
    "sweep_attack_magnitude",
    "sweep_csv",
    "sweep_gamma",
    "trace_csv",
    "validate_model",
    "weighted_least_squares",
    "write_sweep_csv",
    "write_trace_csv",
]

__version__ = "0.1.0"
