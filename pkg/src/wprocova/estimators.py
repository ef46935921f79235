"""The three trial analyses and treatment-effect inference.

All three methods regress the outcome on a design containing the treatment
indicator and report the treatment coefficient with a robust (HC1) variance:

- ``unadjusted``: intercept + treatment;
- ``procova``: intercept + treatment + prognostic score;
- ``wprocova``: same mean model, refit with weights from the variance model
  driven by the log twin variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats, optimize

from .errors import InvalidPower, MixedData, NonPositiveTwinVariance, SingleArm
from .regress import fit_ols, hc_covariance
from .skedastic import SkedasticFit, iterate_weights

METHOD_UNADJUSTED = "unadjusted"
METHOD_PROCOVA = "procova"
METHOD_WPROCOVA = "wprocova"

METHOD_LABELS = {
    METHOD_UNADJUSTED: "Unadjusted",
    METHOD_PROCOVA: "PROCOVA",
    METHOD_WPROCOVA: "Weighted PROCOVA",
}


@dataclass(frozen=True)
class TrialData:
    """Per-participant analysis inputs.

    treatment : 0/1 assignment indicator.
    outcome : endpoint value (e.g. change score).
    prognostic_score : predicted control outcome for the mean model.
    twin_variance : predictive variance for the variance model; must be
        strictly positive.
    """

    treatment: np.ndarray
    outcome: np.ndarray
    prognostic_score: np.ndarray
    twin_variance: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.treatment)
        y = np.asarray(self.outcome, dtype=float)
        m = np.asarray(self.prognostic_score, dtype=float)
        s2 = np.asarray(self.twin_variance, dtype=float)
        n = w.shape[0]
        if not (y.shape == (n,) and m.shape == (n,) and s2.shape == (n,)):
            raise ValueError("treatment, outcome, prognostic_score, twin_variance "
                             "must be 1-d arrays of equal length")
        if not np.isin(w, (0, 1)).all():
            raise ValueError("treatment must contain only 0 and 1")
        w = w.astype(np.int64)
        n_treated = int(w.sum())
        if n_treated < 2 or n - n_treated < 2:
            raise SingleArm(
                f"need at least 2 participants per arm, got {n_treated} treated "
                f"and {n - n_treated} control"
            )
        if not np.isfinite(s2).all() or (s2 <= 0.0).any():
            raise NonPositiveTwinVariance("twin variances must be strictly positive")
        object.__setattr__(self, "treatment", w)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "prognostic_score", m)
        object.__setattr__(self, "twin_variance", s2)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]


@dataclass(frozen=True)
class AnalysisResult:
    """Treatment-effect estimate with robust inference.

    ``hc1_variance`` is the squared HC1 standard error of the estimate.
    """

    method: str
    effect_estimate: float
    hc1_variance: float
    test_statistic: float
    p_value: float
    ci_low: float
    ci_high: float
    n_used: int
    skedastic: SkedasticFit | None = None


def _inference(estimate, variance, alpha, reference, df):
    """Two-sided test and equal-tailed interval for one coefficient."""
    se = math.sqrt(variance)
    if reference == "z":
        dist = stats.norm
        quantile = dist.ppf(1.0 - alpha / 2.0)
        sf = lambda t: dist.sf(t)
    elif reference == "t":
        quantile = stats.t.ppf(1.0 - alpha / 2.0, df)
        sf = lambda t: stats.t.sf(t, df)
    else:
        raise ValueError(f"reference must be 'z' or 't', got {reference!r}")
    if se == 0.0:
        # Degenerate fit: interval collapses onto the estimate.
        statistic = 0.0 if estimate == 0.0 else math.copysign(math.inf, estimate)
        p_value = 1.0 if estimate == 0.0 else 0.0
        return statistic, p_value, estimate, estimate
    statistic = estimate / se
    p_value = 2.0 * float(sf(abs(statistic)))
    half = float(quantile) * se
    return statistic, p_value, estimate - half, estimate + half


def _result(method, X, fit, data, alpha, reference, sked=None):
    variance = float(hc_covariance(fit, X, "HC1").matrix[1, 1])
    estimate = float(fit.beta_hat[1])
    statistic, p_value, lo, hi = _inference(
        estimate, variance, alpha, reference, data.n - X.shape[1]
    )
    return AnalysisResult(
        method=method,
        effect_estimate=estimate,
        hc1_variance=variance,
        test_statistic=statistic,
        p_value=p_value,
        ci_low=lo,
        ci_high=hi,
        n_used=data.n,
        skedastic=sked,
    )


def mean_design(data: TrialData, adjusted: bool) -> np.ndarray:
    """Mean-model design: (1, treatment) or (1, treatment, prognostic score)."""
    ones = np.ones(data.n)
    w = data.treatment.astype(float)
    if adjusted:
        return np.column_stack([ones, w, data.prognostic_score])
    return np.column_stack([ones, w])


def analyze_unadjusted(data: TrialData, alpha: float = 0.05,
                       reference: str = "z") -> AnalysisResult:
    """Difference-in-means analysis via regression on intercept + treatment."""
    X = mean_design(data, adjusted=False)
    fit = fit_ols(X, data.outcome)
    return _result(METHOD_UNADJUSTED, X, fit, data, alpha, reference)


def analyze_procova(data: TrialData, alpha: float = 0.05,
                    reference: str = "z") -> AnalysisResult:
    """Prognostic-score-adjusted analysis (unweighted)."""
    X = mean_design(data, adjusted=True)
    fit = fit_ols(X, data.outcome)
    return _result(METHOD_PROCOVA, X, fit, data, alpha, reference)


def analyze_weighted_procova(data: TrialData, alpha: float = 0.05,
                             iterations: int = 1,
                             reference: str = "z") -> AnalysisResult:
    """Prognostic-score-adjusted analysis with variance-model weights.

    Fits the unweighted adjusted model, estimates the variance model from its
    residuals with the log twin variances as predictor, and refits with the
    implied inverse-variance weights (repeated ``iterations`` times).  The
    reported variance is the HC1 sandwich on the weight-transformed design.
    """
    X = mean_design(data, adjusted=True)
    log_s2 = np.log(data.twin_variance)
    sked, fit = iterate_weights(X, data.outcome, log_s2, iterations=iterations)
    return _result(METHOD_WPROCOVA, X, fit, data, alpha, reference, sked=sked)


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    effect_estimate: float
    hc1_variance: float
    pct_variance_reduction: float


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    rows: tuple[ComparisonRow, ...]


def compare_methods(results, baseline: str | None = None) -> ComparisonTable:
    """Tabulate estimates and percent variance reduction against a baseline.

    ``baseline`` names the reference method; the first result is used when
    omitted.  Reduction is ``100 * (1 - variance / baseline_variance)``.

    Raises
    ------
    MixedData
        If the results do not all come from a dataset of the same size.
    """
    results = list(results)
    if not results:
        raise ValueError("need at least one result to compare")
    sizes = {r.n_used for r in results}
    if len(sizes) > 1:
        raise MixedData(f"results come from datasets of different sizes: {sorted(sizes)}")
    if baseline is None:
        baseline = results[0].method
    by_method = {r.method: r for r in results}
    if baseline not in by_method:
        raise ValueError(f"baseline method {baseline!r} not among the results")
    base_var = by_method[baseline].hc1_variance
    rows = []
    for r in results:
        if base_var == 0.0:
            pct = 0.0 if r.hc1_variance == 0.0 else float("nan")
        else:
            pct = 100.0 * (1.0 - r.hc1_variance / base_var)
        rows.append(ComparisonRow(r.method, r.effect_estimate, r.hc1_variance, pct))
    return ComparisonTable(baseline=baseline, rows=tuple(rows))


@dataclass(frozen=True)
class PowerPair:
    baseline_power: float
    candidate_power: float

    @property
    def boost(self) -> float:
        return self.candidate_power - self.baseline_power


def normal_test_power(snr: float, alpha: float) -> float:
    """Rejection probability of the two-sided normal test at signal-to-noise
    ratio ``snr = |effect| / SE``."""
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    return float(stats.norm.cdf(snr - z) + stats.norm.cdf(-snr - z))


def prospective_power(baseline_var: float, candidate_var: float, effect: float,
                      alpha: float = 0.05, baseline_power: float = 0.8) -> PowerPair:
    """Power of a candidate variance under a baseline-calibrated normal test.

    The normal power curve is anchored so that ``baseline_var`` gives exactly
    ``baseline_power`` for the stated effect and level; the candidate
    variance is then evaluated on the same curve.  Only the variance ratio
    matters, so the effect scale cancels out of the result.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidPower(f"alpha must be in (0, 1), got {alpha}")
    if not (0.0 < baseline_power < 1.0):
        raise InvalidPower(f"baseline power must be in (0, 1), got {baseline_power}")
    if baseline_power < alpha:
        raise InvalidPower(f"baseline power {baseline_power} below the level {alpha}")
    if not (baseline_var > 0.0 and candidate_var > 0.0):
        raise InvalidPower("variances must be strictly positive")
    if effect == 0.0:
        # The two-sided test rejects at rate alpha under a null effect.
        return PowerPair(alpha, alpha)
    if candidate_var == baseline_var:
        return PowerPair(baseline_power, baseline_power)
    snr_base = optimize.brentq(
        lambda t: normal_test_power(t, alpha) - baseline_power, 0.0, 60.0, xtol=1e-12
    )
    snr_cand = snr_base * math.sqrt(baseline_var / candidate_var)
    return PowerPair(baseline_power, normal_test_power(snr_cand, alpha))
