"""Second-order sensitivity of expected-utility maximisation to the market price of risk.

Finite-state trees give exact answers (primal/dual solver, quadratic
coefficients, corrected strategies and a brute-force oracle); a Monte Carlo
backend covers the continuous Merton model and a divergence example.
"""
from .errors import (
    ConfigError,
    DegenerateIncrement,
    InvalidMarket,
    NonConvergence,
    NonPositiveExponential,
    PositivityViolation,
    RiskToleranceMissing,
    SensitivityError,
    ToleranceFailure,
    Unbounded,
)
from .kw import KWDecomposition, hessian_from_kw, kw_decompose, recover_m1_n1
from .market import (
    TreeMarket,
    build_binomial,
    build_lattice,
    build_trinomial,
    compute_F_G,
    l_delta,
    perturbed_returns,
    positivity_radius,
    zeta,
)
from .preferences import (
    UtilitySpec,
    check_growth_inequalities,
    custom_utility,
    log_utility,
    mixed_power_utility,
    power_utility,
)
from .sensitivity import (
    AttainableSpace,
    SensitivityReport,
    analyze,
    build_attainable_space,
    first_order,
    predict_expansion,
    predict_optimizer,
    verify_identities,
)
from .solver import OptimalPair, dual_value, measure_r_tilde, risk_tolerance, solve, solve_unperturbed
from .strategies import CorrectedStrategy, corrected_strategy, corrected_wealth, derive_gammas, select_epsilon

__version__ = "0.1.0"
