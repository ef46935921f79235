"""Variance-function fitting on log squared residuals, and weight diagnostics.

The variance model is ``log(sigma_i^2) = gamma0 + gamma1 * log(s_i^2)`` with
the log twin variance as the sole predictor.  Coefficients are estimated by
regressing the log squared residuals of a mean-model fit on
``(1, log(s_i^2))``; the reciprocal fitted variances are the weights for the
subsequent weighted fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateTwinVariance, DimensionMismatch, EmptyInput
from .regress import RegressionFit, fit_ols, fit_wls

# Squared residuals below this floor are clamped before taking logs; no
# realistic dataset is perturbed, but exact zeros would map to -inf.
RESIDUAL_FLOOR_SQ = 1e-150

# Log twin variances with sample variance at or below this are treated as
# constant: the slope would be unidentifiable.
TWIN_VARIANCE_TOL = 1e-12


@dataclass(frozen=True)
class SkedasticFit:
    """Fitted variance model and the weights it implies.

    ``sigma2_hat_i[i] = exp(gamma0) * (s_i^2)**gamma1`` and
    ``weights[i] = 1 / sigma2_hat_i[i]``.
    """

    gamma0: float
    gamma1: float
    weights: np.ndarray
    sigma2_hat_i: np.ndarray
    r_squared: float
    clamped_count: int


@dataclass(frozen=True)
class DiagnosticsReport:
    """Pre-weighting sanity checks.

    heteroskedasticity_pvalue : two-sided p-value for a zero slope in the
        log-squared-residual regression (evidence of heteroskedasticity).
    twin_variance_dispersion : sample variance of the log twin variances.
    weight_residual_association : Spearman rank correlation between the
        weights and the squared residuals (negative when weighting helps).
    negative_gamma1 : flag for an inverted variance relationship, where
        observations the variance model trusts least would get more weight.
    """

    heteroskedasticity_pvalue: float
    twin_variance_dispersion: float
    weight_residual_association: float
    negative_gamma1: bool


def _clamped_log_sq(residuals):
    e2 = residuals**2
    clamped = int((e2 < RESIDUAL_FLOOR_SQ).sum())
    return np.log(np.maximum(e2, RESIDUAL_FLOOR_SQ)), clamped


def _simple_regression(x, z):
    """Closed-form regression of z on (1, x): intercept, slope, r^2, sxx, rss."""
    xbar = x.mean()
    zbar = z.mean()
    dx = x - xbar
    dz = z - zbar
    sxx = float(dx @ dx)
    sxy = float(dx @ dz)
    szz = float(dz @ dz)
    slope = sxy / sxx
    intercept = zbar - slope * xbar
    r_squared = 0.0 if szz == 0.0 else (sxy * sxy) / (sxx * szz)
    rss = max(szz - slope * sxy, 0.0)
    return intercept, slope, r_squared, sxx, rss


def fit_skedastic(log_s2, residuals) -> SkedasticFit:
    """Fit the variance model to the residuals of a mean-model fit.

    Parameters
    ----------
    log_s2 : array, shape (n,)
        Log twin variances, the sole variance-model predictor.
    residuals : array, shape (n,)
        Residuals from the current mean-model fit.

    Raises
    ------
    DegenerateTwinVariance
        If the log twin variances are (numerically) constant.
    EmptyInput
        If there are fewer than three observations.
    """
    log_s2 = np.asarray(log_s2, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if log_s2.shape != residuals.shape or log_s2.ndim != 1:
        raise DimensionMismatch(
            f"log twin variances {log_s2.shape} and residuals {residuals.shape} must be "
            "1-d of equal length"
        )
    n = log_s2.shape[0]
    if n < 3:
        raise EmptyInput(f"variance model needs at least 3 observations, got {n}")
    if float(np.var(log_s2, ddof=1)) <= TWIN_VARIANCE_TOL:
        raise DegenerateTwinVariance("log twin variances are constant; slope unidentifiable")
    z, clamped = _clamped_log_sq(residuals)
    gamma0, gamma1, r_squared, _, _ = _simple_regression(log_s2, z)
    linpred = gamma0 + gamma1 * log_s2
    return SkedasticFit(
        gamma0=gamma0,
        gamma1=gamma1,
        weights=np.exp(-linpred),
        sigma2_hat_i=np.exp(linpred),
        r_squared=r_squared,
        clamped_count=clamped,
    )


def iterate_weights(V, y, log_s2, iterations: int = 1) -> tuple[SkedasticFit, RegressionFit]:
    """Alternate between the mean-model fit and the variance-model fit.

    Iteration zero is the unweighted fit.  Each subsequent iteration fits the
    variance model to the current residuals and refits the mean model with
    the implied weights.  Returns the final (variance fit, mean fit) pair.

    The default single iteration is the standard choice; more iterations are
    allowed but there is no convergence criterion, only a count.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    fit = fit_ols(V, y)
    sked = None
    for _ in range(iterations):
        sked = fit_skedastic(log_s2, fit.residuals)
        fit = fit_wls(V, y, sked.sigma2_hat_i)
    return sked, fit


def diagnostics(fit: SkedasticFit, residuals, log_s2) -> DiagnosticsReport:
    """Run the standard checks on a fitted variance model."""
    residuals = np.asarray(residuals, dtype=float)
    log_s2 = np.asarray(log_s2, dtype=float)
    if residuals.shape != log_s2.shape or residuals.shape != fit.weights.shape:
        raise DimensionMismatch("residuals, log twin variances, and fit must have equal length")
    n = residuals.shape[0]
    z, _ = _clamped_log_sq(residuals)
    _, slope, _, sxx, rss = _simple_regression(log_s2, z)
    df = n - 2
    se = np.sqrt(rss / df / sxx) if df > 0 else 0.0
    if se == 0.0:
        pvalue = 1.0 if slope == 0.0 else 0.0
    else:
        pvalue = 2.0 * float(stats.t.sf(abs(slope) / se, df))
    rho = stats.spearmanr(fit.weights, residuals**2).statistic
    if np.isnan(rho):
        rho = 0.0
    return DiagnosticsReport(
        heteroskedasticity_pvalue=pvalue,
        twin_variance_dispersion=float(np.var(log_s2, ddof=1)),
        weight_residual_association=float(rho),
        negative_gamma1=bool(fit.gamma1 < 0.0),
    )
