"""Confounding-robust policy learning and human/AI routing from logged data."""

from .core import (
    BaselinePolicy,
    ConstantRouter,
    CostModel,
    GammaSpec,
    LinearPolicy,
    LinearRouter,
    LoggedDataset,
    ValidationReport,
    load_dataset_csv,
    save_dataset_csv,
    validate,
)
from .msm import LfpSolution, WeightBounds, solve_lfp, solve_lfp_bruteforce, weight_bounds
from .objective import (
    ObjectiveValue,
    gradient,
    hard_destinations,
    objective_at_weights,
    personalized_worst_case_regret,
    personalized_worst_case_regret_vs_human,
    team_risk,
    worst_case_objective,
    worst_case_regret,
    worst_case_regret_vs_human,
)
from .propensity import (
    AssignmentModel,
    ConvergenceError,
    PropensityModel,
    calibrate_gamma,
    calibrate_gamma_report,
    fit_assignment,
    fit_nominal_propensity,
)
from .synthgen import (
    RouteQuantities,
    SyntheticTruth,
    ToyTruth,
    generate_synthetic,
    generate_toy,
    oracle_regret,
    oracle_route,
    oracle_team_value,
    save_truth_csv,
    synthetic_route_quantities,
    tilted_propensity,
    toy_route_quantities,
)
from .train import (
    DivergenceError,
    TrainConfig,
    TrainedSystem,
    evaluate_human_only,
    train_ao,
    train_confao,
    train_confhai,
    train_confhai_personalized,
    train_hai,
)
from .harness import EvalReport, EvalRow, ExperimentConfig, emit_report, run_experiment

__version__ = "0.1.0"
