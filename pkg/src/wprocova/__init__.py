"""Weighted prognostic covariate adjustment for randomized trial analysis."""

from .errors import WprocovaError
from .estimators import (
    METHOD_PROCOVA,
    METHOD_UNADJUSTED,
    METHOD_WPROCOVA,
    AnalysisResult,
    ComparisonTable,
    PowerPair,
    TrialData,
    analyze_procova,
    analyze_unadjusted,
    analyze_weighted_procova,
    compare_methods,
    prospective_power,
)
from .regress import RegressionFit, SandwichCovariance, fit_ols, fit_wls, hc_covariance
from .simulation import SimulationConfig, SimulationMetrics, find_n_for_power, run_cell, run_grid
from .skedastic import DiagnosticsReport, SkedasticFit, diagnostics, fit_skedastic, iterate_weights

__version__ = "0.1.0"

__all__ = [
    "AnalysisResult",
    "ComparisonTable",
    "DiagnosticsReport",
    "METHOD_PROCOVA",
    "METHOD_UNADJUSTED",
    "METHOD_WPROCOVA",
    "PowerPair",
    "RegressionFit",
    "SandwichCovariance",
    "SimulationConfig",
    "SimulationMetrics",
    "SkedasticFit",
    "TrialData",
    "WprocovaError",
    "analyze_procova",
    "analyze_unadjusted",
    "analyze_weighted_procova",
    "compare_methods",
    "diagnostics",
    "find_n_for_power",
    "fit_ols",
    "fit_skedastic",
    "fit_wls",
    "hc_covariance",
    "iterate_weights",
    "prospective_power",
    "run_cell",
    "run_grid",
]
