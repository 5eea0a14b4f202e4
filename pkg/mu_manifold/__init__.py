__version__ = "0.1.0"

from .growth import GrowthRate, make_growth, parse_growth, power_integral, power_integral_quad, validate_growth
from .linsys import (
    ClosedFormExample,
    DichotomyReport,
    DichotomySpec,
    GeneralLinearSystem,
    IntegrationError,
    PairGrid,
    Splitting,
    check_dichotomy,
    commutation_residual,
    evolution_operator,
    example_system,
    make_pair_grid,
    nonuniformity_witness,
    propagate,
    propagate_matrix,
    unstable_inverse,
)
from .manifold import (
    ConvergenceError,
    GraphFunction,
    LyapunovPerronSolver,
    OuterDiagnostics,
    SolverConfig,
    TrajectoryFamily,
    graph_class_report,
    grid_refinement_check,
    inner_operator_J,
    outer_operator_Phi,
    pair_distance_bound_check,
    ramp_graph,
    required_t_max,
    solve_manifold,
    solve_x,
    split_identity_residual,
    trajectory_class_report,
    weighted_norm_B,
    weighted_norm_X,
)
from .perturb import (
    DeltaBounds,
    Perturbation,
    check_perturbation,
    default_samples,
    delta_max,
    huber_swap,
    make_perturbation,
    parse_delta,
)
from .utils import BoundReport, ValidationReport
from .verify import (
    ResidualReport,
    SemiflowSample,
    ShootingResult,
    decay_check,
    integrate_nonlinear,
    integrate_nonlinear_batch,
    invariance_residual,
    shooting_oracle,
    tangency_check,
)
