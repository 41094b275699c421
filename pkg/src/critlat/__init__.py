"""Numerical laboratory for the critical long-range conductance lattice.

Random walks and elliptic problems among i.i.d. uniformly elliptic
conductances with jump weight |x - y|^-(d+2): exact kernel normalisations,
a matrix-free nonlocal generator on open boxes, corrector and resolvent
solves, divergence-free flux certificates, slab-averaging machinery behind
the critical Poincare inequality, heavy-tailed walk simulation with
counter-based randomness, and a sweep harness with validated configs.
"""

from .environment import EnvironmentSpec
from .grid import (
    Discretization,
    DomainSpec,
    GridFunction,
    dirichlet_form,
    discretize,
    h1crit_seminorm,
    hminus1crit_norm,
    l2_norm,
)
from .harness import fit_rate, load_config, run_experiment, validate_config
from .kernel import (
    kappa_eps,
    kernel_j,
    lattice_sum_alpha,
    lattice_tail_alpha,
    log_asymptote,
    second_moment_matrix,
    slab_points,
    slab_weights,
    total_kernel_mass,
    unit_ball_volume,
)
from .operator import OperatorHandle, TruncationPolicy
from .poincare import (
    LatticeWindow,
    admissible_scales,
    exit_steps,
    poincare_constant,
    single_scale_ratio,
    slab_average,
)
from .flux import (
    SolenoidalField,
    canonical_path,
    energy_upper_bound_check,
    path_edge_count,
)
from .solver import (
    CorrectorReport,
    SolveReport,
    SolverFailure,
    conjugate_gradient,
    homogenization_error,
    ScalingReport,
    scaling_identity_check,
    solve_corrector,
    solve_homogenized,
    solve_resolvent,
    two_scale_residual,
)
from .walk import (
    JumpSampler,
    Trajectory,
    build_sampler,
    heat_kernel_evolve,
    qip_statistics,
    run_qip,
    run_ring,
    rescaled_endpoint,
    simulate_path,
)

__version__ = "0.1.0"

__all__ = [
    "EnvironmentSpec",
    "DomainSpec",
    "Discretization",
    "GridFunction",
    "discretize",
    "l2_norm",
    "h1crit_seminorm",
    "dirichlet_form",
    "hminus1crit_norm",
    "kappa_eps",
    "kernel_j",
    "lattice_sum_alpha",
    "lattice_tail_alpha",
    "log_asymptote",
    "second_moment_matrix",
    "slab_points",
    "slab_weights",
    "total_kernel_mass",
    "unit_ball_volume",
    "OperatorHandle",
    "TruncationPolicy",
    "SolveReport",
    "SolverFailure",
    "CorrectorReport",
    "conjugate_gradient",
    "solve_resolvent",
    "solve_corrector",
    "solve_homogenized",
    "homogenization_error",
    "ScalingReport",
    "scaling_identity_check",
    "two_scale_residual",
    "SolenoidalField",
    "canonical_path",
    "path_edge_count",
    "energy_upper_bound_check",
    "LatticeWindow",
    "slab_average",
    "exit_steps",
    "admissible_scales",
    "single_scale_ratio",
    "poincare_constant",
    "JumpSampler",
    "build_sampler",
    "Trajectory",
    "rescaled_endpoint",
    "simulate_path",
    "run_qip",
    "qip_statistics",
    "run_ring",
    "heat_kernel_evolve",
    "load_config",
    "validate_config",
    "run_experiment",
    "fit_rate",
    "__version__",
]
