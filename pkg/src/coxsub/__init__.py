"""Cox proportional hazards estimation via two-stage optimal subsampling.

The package covers the full-data partial-likelihood machinery, A-optimal
subsampling probabilities with a pilot stage, weighted subsample estimation
with sandwich variance, a Monte Carlo study harness, and a CLI
(``coxsub simulate | fit | analyze``).
"""

from .cox import (
    BaselineHazard,
    CoxFit,
    RiskSetSums,
    SolverOptions,
    breslow,
    linear_predictors,
    log_partial_likelihood,
    newton_solve,
    risk_set_sums,
    score_and_hessian,
)
from .data import (
    Cohort,
    CsvSchema,
    SortedCohort,
    SurvivalRecord,
    censoring_split,
    load_csv,
    save_csv,
    sort_cohort,
)
from .errors import (
    CalibrationError,
    ConvergenceError,
    CoxSubError,
    DataError,
    DegenerateStratumError,
    EstimationError,
    PilotError,
    SingularHessianError,
)
from .sampling import (
    QScores,
    SamplingMethod,
    Subsample,
    SubsamplingPlan,
    cenopt_probs,
    draw_subsample,
    fullopt_probs,
    pilot_stage,
    q_scores,
    uniform_probs,
)
from .simulate import (
    BETA0,
    CASES,
    Baseline,
    MetricsTable,
    ScenarioConfig,
    ScenarioResult,
    calibrate_censoring,
    compute_metrics,
    gen_covariates,
    gen_event_times,
    make_cohort,
    repeated_subsampling,
    run_scenario,
)
from .weighted import (
    LambdaVariance,
    WeightedBaseline,
    WeightedFit,
    WeightedRiskSums,
    confidence_intervals,
    full_data_sandwich,
    normal_quantile,
    run_algorithm1,
    run_report,
    sandwich_variance,
    weighted_breslow,
    weighted_log_likelihood,
    weighted_newton,
    weighted_risk_sums,
    weighted_score_hessian,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # data
    "SurvivalRecord", "Cohort", "SortedCohort", "CsvSchema",
    "load_csv", "save_csv", "sort_cohort", "censoring_split",
    # full-data estimation
    "RiskSetSums", "CoxFit", "BaselineHazard", "SolverOptions",
    "linear_predictors", "risk_set_sums", "log_partial_likelihood",
    "score_and_hessian", "newton_solve", "breslow",
    # subsampling
    "SamplingMethod", "QScores", "SubsamplingPlan", "Subsample",
    "q_scores", "fullopt_probs", "cenopt_probs", "uniform_probs",
    "draw_subsample", "pilot_stage",
    # weighted estimation
    "WeightedRiskSums", "WeightedFit", "WeightedBaseline", "LambdaVariance",
    "weighted_risk_sums", "weighted_log_likelihood", "weighted_score_hessian",
    "weighted_newton", "sandwich_variance", "weighted_breslow",
    "confidence_intervals", "normal_quantile", "full_data_sandwich",
    "run_algorithm1", "run_report",
    # simulation
    "Baseline", "BETA0", "CASES", "ScenarioConfig", "ScenarioResult",
    "MetricsTable", "gen_covariates", "gen_event_times", "make_cohort",
    "calibrate_censoring", "run_scenario", "compute_metrics",
    "repeated_subsampling",
    # errors
    "CoxSubError", "DataError", "EstimationError", "SingularHessianError",
    "ConvergenceError", "PilotError", "DegenerateStratumError",
    "CalibrationError",
]
