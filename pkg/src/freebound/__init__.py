"""Free-boundary toolkit for irreversible investment under stochastic costs.

Solves the parametric Fredholm integral equations for the optimal stopping
boundaries of the associated stopping problems, assembles the investment
boundary surface, simulates the reflected optimal control, and cross-checks
everything against Monte Carlo and lattice dynamic-programming oracles.
"""

from .model import (
    CostModel,
    DiffusionSpec,
    Interval,
    ProblemSpec,
    UnsupportedModelError,
    ValidationReport,
    benchmark,
    density,
    discounted_pull_below,
    load_spec,
    survival_above,
    validate,
)
from .quadrature import (
    SpaceQuadrature,
    TimeQuadrature,
    discounted_time_integral,
    space_quadrature,
    time_quadrature,
    weighted_space_integral,
)
from .boundary import (
    Boundary,
    ConvergenceError,
    F,
    SolverConfig,
    ThresholdCurve,
    check_regions_nonempty,
    edge_lower,
    edge_upper,
    fredholm_rhs,
    solve_boundary,
    solve_threshold,
    threshold_curve,
    uniqueness_probe,
)
from .costs import Phi, phi_marginal
from .value import (
    ConstantTimeRule,
    MCConfig,
    StoppingRule,
    StoppingValue,
    ValueEvaluator,
    ibp_identity_check,
    payoff_of_rule,
    smooth_fit_probe,
    supermartingale_probe,
    value_analytic,
)
from .control import (
    BoundarySurface,
    ControlPath,
    ControlValueReport,
    CoverageError,
    JumpPolicy,
    NullPolicy,
    ReflectPolicy,
    UEvaluator,
    build_surface,
    default_z_grid,
    estimate_J,
    evaluate_U,
    simulate_control,
    verify_theorem,
    zbar,
)
from .oracle import (
    ControlTable,
    LatticeSpec,
    StoppingTable,
    compare_invest_region,
    compare_stopping_boundary,
    control_value_iteration,
    lattice_for,
    lattice_quantile_window,
    stopping_value_iteration,
)

__version__ = "0.1.0"
