"""Stabilization of unknown discrete-time systems by discount-annealed
policy gradients, with exact Riccati/Lyapunov oracles for verification."""

from .anneal import (
    AdamOptimizer,
    AnnealConfig,
    AnnealState,
    BudgetExceededError,
    InnerDivergedError,
    PgConfig,
    PgObjective,
    SearchBracket,
    binary_search_gamma,
    discount_anneal,
    policy_gradient,
    random_search_gamma,
)
from .bench import (
    CartpoleBenchConfig,
    LinearSuiteConfig,
    RoaConfig,
    RoaReport,
    estimate_roa,
    run_cartpole,
    run_counterexample,
    run_linear_suite,
    run_lqr_baseline,
)
from .dynamics import (
    CartPoleParams,
    NonlinearSystem,
    Rollout,
    cartpole,
    damped_rollout,
    jacobian_linearization,
    linear_as_nonlinear,
    rollout_to_csv,
)
from .lqr import (
    NoWitnessFoundError,
    damp,
    lqr_cost,
    lqr_grad,
    reward_shaping_counterexample,
    state_covariance,
    value_matrix,
)
from .matops import (
    NotStabilizableError,
    UnstableError,
    dlyap,
    solve_dare,
    spectral_radius,
)
from .model import CostSpec, LinearSystem
from .oracles import (
    DivergedAllError,
    OracleConfig,
    QueryResult,
    eps_eval,
    eps_grad_sensitivity,
    eps_grad_zeroth_order,
)

__version__ = "0.1.0"

__all__ = [
    "AdamOptimizer",
    "AnnealConfig",
    "AnnealState",
    "BudgetExceededError",
    "CartPoleParams",
    "CartpoleBenchConfig",
    "CostSpec",
    "DivergedAllError",
    "InnerDivergedError",
    "LinearSuiteConfig",
    "LinearSystem",
    "NonlinearSystem",
    "NoWitnessFoundError",
    "NotStabilizableError",
    "OracleConfig",
    "PgConfig",
    "PgObjective",
    "QueryResult",
    "RoaConfig",
    "RoaReport",
    "Rollout",
    "SearchBracket",
    "UnstableError",
    "binary_search_gamma",
    "cartpole",
    "damp",
    "damped_rollout",
    "discount_anneal",
    "dlyap",
    "eps_eval",
    "eps_grad_sensitivity",
    "eps_grad_zeroth_order",
    "estimate_roa",
    "jacobian_linearization",
    "linear_as_nonlinear",
    "lqr_cost",
    "lqr_grad",
    "policy_gradient",
    "random_search_gamma",
    "reward_shaping_counterexample",
    "rollout_to_csv",
    "run_cartpole",
    "run_counterexample",
    "run_linear_suite",
    "run_lqr_baseline",
    "solve_dare",
    "spectral_radius",
    "state_covariance",
    "value_matrix",
]
