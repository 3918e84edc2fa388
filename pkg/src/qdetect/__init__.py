"""Quickest detection of a simultaneous change in Wiener and marked point
process observations: Monte Carlo fundamental solutions, value iteration
with certified accuracy, and policy simulation."""

from .chain import (
    GridSpec,
    InconsistencyError,
    MCConfig,
    MCEstimate,
    StepParams,
    discounted_running_cost,
    hitting_laplace,
    local_consistency_check,
    step_params,
    suggest_h,
)
from .fundamental import (
    DivisionInstabilityError,
    FundamentalSolutions,
    build,
    compute_eta,
    compute_psi,
    extend_grid,
    scale_density,
    wronskian_ref,
)
from .marks import (
    AbsoluteContinuityError,
    GridFunction,
    JumpFactorTable,
    MarkModel,
    apply_K,
    jump_factor_table,
    likelihood_ratio,
)
from .model import (
    PoissonSource,
    ReducedModel,
    SourceSpec,
    bayes_risk_from_value,
    reduce_sources,
    running_cost_g,
)
from .reference import (
    AsymptoticPair,
    bt_expansion,
    remark32_oracles,
    wiener_risk,
    wiener_threshold,
    wiener_value,
)
from .simulate import (
    ObservationPath,
    RiskEstimate,
    ScenarioConfig,
    ScenarioOutcome,
    evaluate_policy,
    run_filter,
    sample_scenario,
)
from .solver import (
    IterationTrace,
    MonotonicityError,
    Solution,
    ThresholdError,
    ValueFunction,
    apply_H_mc,
    apply_H_quadrature,
    find_threshold,
    phi_ell,
    solve,
    value_iterate,
)

__version__ = "0.1.0"
