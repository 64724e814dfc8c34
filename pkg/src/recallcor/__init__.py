"""Marginal causal odds ratios from case-control data under recall bias.

Estimation (maximum likelihood and score-based stratification), bootstrap
inference, sensitivity analysis over misreporting rates, and the minimal
bias that overturns a conclusion.
"""

__version__ = "0.1.0"

from .data_model import (
    BiasDirection,
    CaseControlData,
    DegenerateData,
    EstimateResult,
    EstimationError,
    Method,
    MissingColumn,
    NonBinaryExposure,
    NonBinaryOutcome,
    RaggedRow,
    RecallBias,
    ValidationError,
    load_csv,
    validate_bias_feasibility,
    write_csv,
)
from .glm import LogisticFit, Separation, SingularDesign, fit_logistic, predict_prob
from .ml_estimator import (
    DegenerateLikelihood,
    DegenerateMarginal,
    MlParams,
    NonConvergence,
    fit_ml,
    joint_prob,
    ml_marginal_cor,
)
from .sensitivity import (
    GridCell,
    Ordering,
    RFactorResult,
    SensitivityGrid,
    TooManyFailedResamples,
    bootstrap_ci,
    check_ordering_conditional,
    check_ordering_marginal,
    make_estimator,
    r_factor,
    sensitivity_scan,
    write_grid_csv,
)
from .simulation import (
    SYNTHETIC_SCHEMA,
    BiasImpactPoint,
    SimulatedData,
    SimulationScenario,
    StudyReport,
    bias_impact_curve,
    null_exposure_dataset,
    parse_scenario_file,
    run_study,
    simulate_dataset,
    solve_gamma_t,
    standard_scenarios,
    synthetic_study,
    true_log_marginal_cor,
    write_study_csv,
)
from .stratification import (
    CorrectedTable,
    EmptyStratum,
    EmptyStratumCell,
    InfeasibleBias,
    ScoreFitFailure,
    ScoreType,
    StratumTable,
    ZeroDenominator,
    build_strata,
    correct_table,
    crude_cor,
    mantel_haenszel_cor,
    mantel_haenszel_from_tables,
    stratified_marginal_cor,
    stratified_marginal_cor_from_tables,
    tables_from_data,
)

__all__ = [name for name in dir() if not name.startswith("_")]
