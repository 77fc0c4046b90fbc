"""Finite mixture regression for panel data: constrained maximum
likelihood, component-count selection (sequential LRT with parametric
bootstrap or simulated asymptotic critical values, AIC/BIC), and a
nonparametric rank-based lower bound, plus a reproducible simulation
harness and command-line front end."""

from ._version import __version__
from .errors import (
    DataError,
    DegenerateComponentError,
    DegeneratePartitionError,
    DimensionError,
    IllConditionedError,
    InfeasibleConstraintError,
    NonConvergenceError,
    OptimizationFailureError,
    PanelMixError,
    UnsupportedModelError,
)
from .model import (
    ComponentParams,
    ConstraintSet,
    MixtureParams,
    ModelSpec,
    PanelDataset,
    canonicalize,
    component_log_density,
    enforce_constraints,
    free_param_count,
    log_likelihood,
    mixture_log_density,
    params_from_dict,
    params_to_dict,
)
from .em import (
    EmConfig,
    FitResult,
    Posteriors,
    e_step,
    fit_local_mle,
    fit_mle,
    free_param_labels,
    m_step,
    pack_params,
    sandwich_se,
    unpack_params,
)
from .asymptotic import (
    InfoMatrix,
    ScoreBundle,
    cone_project,
    hermite,
    information_matrix,
    score_vector,
    simulate_critical_value,
    simulate_null_distribution,
    v_map,
)
from .selection import (
    SelectionResult,
    count_parameters,
    information_criteria,
    lrt_statistic,
    parametric_bootstrap_pvalue,
    sequential_pvalues,
    sequential_select,
)
from .ranktest import (
    DiscretizedPanel,
    RankTestResult,
    ave_max_rk,
    bayesian_bootstrap_pvalue,
    build_partition,
    estimate_Pk,
    rank_sequential_lower_bound,
    rk_statistic,
)
from .simulate import (
    DgpSpec,
    ExperimentReport,
    builtin_design,
    run_selection_frequency_experiment,
    run_size_power_experiment,
    simulate_panel,
)
from .cli import ingest_csv

__all__ = [
    "__version__",
    "PanelMixError", "DataError", "DimensionError",
    "InfeasibleConstraintError", "DegenerateComponentError",
    "NonConvergenceError", "UnsupportedModelError",
    "DegeneratePartitionError", "IllConditionedError",
    "OptimizationFailureError",
    "PanelDataset", "ModelSpec", "ComponentParams", "MixtureParams",
    "ConstraintSet", "canonicalize", "enforce_constraints",
    "component_log_density", "mixture_log_density", "log_likelihood",
    "free_param_count", "params_to_dict", "params_from_dict",
    "EmConfig", "FitResult", "Posteriors", "e_step", "m_step", "fit_mle",
    "fit_local_mle", "pack_params", "unpack_params", "sandwich_se",
    "free_param_labels",
    "ScoreBundle", "InfoMatrix", "hermite", "score_vector",
    "information_matrix", "v_map", "cone_project",
    "simulate_critical_value", "simulate_null_distribution",
    "SelectionResult", "count_parameters", "lrt_statistic",
    "parametric_bootstrap_pvalue", "sequential_pvalues",
    "sequential_select", "information_criteria",
    "DiscretizedPanel", "RankTestResult", "build_partition", "estimate_Pk",
    "rk_statistic", "ave_max_rk", "bayesian_bootstrap_pvalue",
    "rank_sequential_lower_bound",
    "DgpSpec", "ExperimentReport", "builtin_design", "simulate_panel",
    "run_size_power_experiment", "run_selection_frequency_experiment",
    "ingest_csv",
]
