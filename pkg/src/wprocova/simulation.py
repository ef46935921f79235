"""Monte Carlo engine for operating characteristics of the three analyses.

A cell is one parameter combination; a grid is a list of cells.  Every
random number is determined by ``(seed, replication, stream)``, so results
are reproducible and independent of parallelism and execution order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConstantFactor, InvalidScenarioParams, Unattainable, WprocovaError
from .estimators import (
    METHOD_PROCOVA,
    METHOD_UNADJUSTED,
    METHOD_WPROCOVA,
    TrialData,
    analyze_procova,
    analyze_unadjusted,
    analyze_weighted_procova,
)
from .regress import classic_covariance, fit_ols
from .rng import derive_seed, substream
from scipy import stats

SCENARIO_FIXED_TOTAL = "fixed_total"
SCENARIO_DETERMINISTIC = "deterministic"
SCENARIO_FIXED_NOISE = "fixed_noise"
SCENARIOS = (SCENARIO_FIXED_TOTAL, SCENARIO_DETERMINISTIC, SCENARIO_FIXED_NOISE)

#: Total variance of the log participant variances under the fixed-total
#: scenario; the noise variance is this constant minus the explained part.
TOTAL_LOG_VARIANCE = 4.0

METHODS = (METHOD_UNADJUSTED, METHOD_PROCOVA, METHOD_WPROCOVA)


@dataclass(frozen=True)
class SimulationConfig:
    """One cell of the simulation grid.

    Outcomes are ``beta0 + beta1 * w + beta2 * m + eps`` with
    ``log sigma2 = gamma0 + gamma1 * log s2 + gamma2 * u2 + zeta``;
    ``m``, ``log s2``, and ``u2`` are independent centered normals with
    variances ``tau1_sq``, ``tau2_sq``, ``tau3_sq``.  The ``u2`` factor can
    add heteroskedasticity but is never given to the analysis, and the noise
    variance of ``zeta`` is set by the scenario:

    - ``fixed_total``: ``psi_sq = TOTAL_LOG_VARIANCE - gamma1^2 * tau2_sq``;
    - ``deterministic``: ``psi_sq = 0``;
    - ``fixed_noise``: ``psi_sq = 1``.
    """

    n: int
    scenario: str = SCENARIO_FIXED_NOISE
    beta0: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    gamma0: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    tau1_sq: float = 1.0
    tau2_sq: float = 0.5
    tau3_sq: float = 1.0
    psi_sq: float | None = None
    replications: int = 10_000
    seed: int = 0
    alpha: float = 0.05

    @property
    def n_treated(self) -> int:
        return self.n // 2

    def resolved_psi_sq(self) -> float:
        if self.scenario == SCENARIO_FIXED_TOTAL:
            explained = self.gamma1**2 * self.tau2_sq
            if explained >= TOTAL_LOG_VARIANCE:
                raise InvalidScenarioParams(
                    f"gamma1^2 * tau2_sq = {explained} must stay below "
                    f"{TOTAL_LOG_VARIANCE} under the fixed-total scenario"
                )
            forced = TOTAL_LOG_VARIANCE - explained
        elif self.scenario == SCENARIO_DETERMINISTIC:
            forced = 0.0
        elif self.scenario == SCENARIO_FIXED_NOISE:
            forced = 1.0
        else:
            raise InvalidScenarioParams(f"unknown scenario {self.scenario!r}")
        if self.psi_sq is not None and abs(self.psi_sq - forced) > 1e-12:
            raise InvalidScenarioParams(
                f"psi_sq={self.psi_sq} conflicts with scenario {self.scenario!r} "
                f"which forces {forced}"
            )
        return forced

    def validate(self):
        if self.n < 4 or self.n % 2:
            raise InvalidScenarioParams(f"n must be even and >= 4, got {self.n}")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidScenarioParams(f"alpha must be in (0, 1), got {self.alpha}")
        for name in ("tau1_sq", "tau2_sq", "tau3_sq"):
            if getattr(self, name) <= 0.0:
                raise InvalidScenarioParams(f"{name} must be positive")
        self.resolved_psi_sq()


def generate_trial(config: SimulationConfig, replication_index: int) -> TrialData:
    """Generate one replication, fully determined by (config.seed, index)."""
    config.validate()
    rng = substream(config.seed, replication_index)
    n = config.n
    psi_sq = config.resolved_psi_sq()
    m = rng.normal(0.0, math.sqrt(config.tau1_sq), n)
    log_s2 = rng.normal(0.0, math.sqrt(config.tau2_sq), n)
    u2 = rng.normal(0.0, math.sqrt(config.tau3_sq), n)
    zeta = rng.normal(0.0, math.sqrt(psi_sq), n) if psi_sq > 0.0 else np.zeros(n)
    w = np.zeros(n, dtype=np.int64)
    w[rng.permutation(n)[: config.n_treated]] = 1
    log_sigma2 = config.gamma0 + config.gamma1 * log_s2 + config.gamma2 * u2 + zeta
    eps = rng.standard_normal(n) * np.exp(0.5 * log_sigma2)
    y = config.beta0 + config.beta1 * w + config.beta2 * m + eps
    return TrialData(w, y, m, np.exp(log_s2))


@dataclass
class CellDraws:
    """Per-replication records for one cell; arrays indexed by method name."""

    estimates: dict
    rejected: dict
    covered: dict
    hc1_variances: dict
    pct_var_reduction: np.ndarray
    error_count: int
    replications: int


def simulate_cell(config: SimulationConfig) -> CellDraws:
    """Run all replications of one cell, recording per-method results.

    Individual replication failures are counted, never fatal; aggregation
    downstream decides whether the cell as a whole is usable.
    """
    config.validate()
    reps = config.replications
    estimates = {m: np.full(reps, np.nan) for m in METHODS}
    rejected = {m: np.zeros(reps, dtype=bool) for m in METHODS}
    covered = {m: np.zeros(reps, dtype=bool) for m in METHODS}
    variances = {m: np.full(reps, np.nan) for m in METHODS}
    pct_vr = np.full(reps, np.nan)
    errors = 0
    analyses = (
        (METHOD_UNADJUSTED, analyze_unadjusted, {}),
        (METHOD_PROCOVA, analyze_procova, {}),
        (METHOD_WPROCOVA, analyze_weighted_procova, {"iterations": 1}),
    )
    for r in range(reps):
        try:
            data = generate_trial(config, r)
            results = {}
            for method, analyze, kwargs in analyses:
                results[method] = analyze(data, alpha=config.alpha, **kwargs)
        except WprocovaError:
            errors += 1
            continue
        for method, res in results.items():
            estimates[method][r] = res.effect_estimate
            rejected[method][r] = res.p_value < config.alpha
            covered[method][r] = res.ci_low <= config.beta1 <= res.ci_high
            variances[method][r] = res.hc1_variance
        var_p = results[METHOD_PROCOVA].hc1_variance
        var_w = results[METHOD_WPROCOVA].hc1_variance
        if var_p > 0.0:
            pct_vr[r] = 100.0 * (1.0 - var_w / var_p)
    return CellDraws(estimates, rejected, covered, variances, pct_vr, errors, reps)


@dataclass(frozen=True)
class MethodSummary:
    bias: float
    rejection_rate: float
    coverage: float
    mean_hc1_variance: float
    sd_estimate: float


@dataclass
class SimulationMetrics:
    """Aggregated operating characteristics of one cell.

    Headline metrics (``bias``, ``type1_or_power``, ``coverage``) refer to
    the weighted analysis; ``methods`` carries the same summaries for all
    three.  ``ok`` is false when the cell configuration failed outright or
    more than 1% of replications errored.
    """

    config: SimulationConfig
    ok: bool
    failure: str | None
    replications_used: int
    error_count: int
    bias: float = math.nan
    type1_or_power: float = math.nan
    coverage: float = math.nan
    mean_pct_var_reduction: float = math.nan
    median_pct_var_reduction: float = math.nan
    sd_pct_var_reduction: float = math.nan
    var_inflation_prob: float = math.nan
    methods: dict = field(default_factory=dict)


def summarize_cell(config: SimulationConfig, draws: CellDraws) -> SimulationMetrics:
    used = draws.replications - draws.error_count
    ok = draws.error_count <= 0.01 * draws.replications and used > 0
    metrics = SimulationMetrics(
        config=config,
        ok=ok,
        failure=None if ok else f"{draws.error_count} of {draws.replications} replications errored",
        replications_used=used,
        error_count=draws.error_count,
    )
    if used == 0:
        return metrics
    good = ~np.isnan(draws.estimates[METHOD_WPROCOVA])
    for method in METHODS:
        est = draws.estimates[method][good]
        metrics.methods[method] = MethodSummary(
            bias=float(est.mean() - config.beta1),
            rejection_rate=float(draws.rejected[method][good].mean()),
            coverage=float(draws.covered[method][good].mean()),
            mean_hc1_variance=float(draws.hc1_variances[method][good].mean()),
            sd_estimate=float(est.std(ddof=1)) if est.size > 1 else math.nan,
        )
    head = metrics.methods[METHOD_WPROCOVA]
    metrics.bias = head.bias
    metrics.type1_or_power = head.rejection_rate
    metrics.coverage = head.coverage
    pct = draws.pct_var_reduction[good]
    pct = pct[~np.isnan(pct)]
    if pct.size:
        metrics.mean_pct_var_reduction = float(pct.mean())
        metrics.median_pct_var_reduction = float(np.median(pct))
        metrics.sd_pct_var_reduction = float(pct.std(ddof=1)) if pct.size > 1 else math.nan
        metrics.var_inflation_prob = float((pct < 0.0).mean())
    return metrics


def run_cell(config: SimulationConfig) -> SimulationMetrics:
    """Simulate one cell and aggregate its operating characteristics."""
    if config.replications < 100:
        raise InvalidScenarioParams(
            f"need at least 100 replications per cell, got {config.replications}"
        )
    return summarize_cell(config, simulate_cell(config))


def _run_cell_collecting(config: SimulationConfig):
    try:
        if config.replications < 100:
            raise InvalidScenarioParams(
                f"need at least 100 replications per cell, got {config.replications}"
            )
        draws = simulate_cell(config)
        return summarize_cell(config, draws), draws.pct_var_reduction
    except WprocovaError as err:
        failed = SimulationMetrics(
            config=config,
            ok=False,
            failure=str(err),
            replications_used=0,
            error_count=config.replications,
        )
        return failed, np.empty(0)


def run_grid_collecting(grid, parallelism: int = 1):
    """As :func:`run_grid`, but also return per-replication variance
    reductions per cell (for plot data)."""
    grid = list(grid)
    if not grid:
        raise ValueError("grid must contain at least one cell")
    if parallelism <= 1 or len(grid) == 1:
        return [_run_cell_collecting(cfg) for cfg in grid]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_run_cell_collecting, grid))


def run_grid(grid, parallelism: int = 1) -> list[SimulationMetrics]:
    """Run each cell of the grid, preserving input order.

    Cells are independent, so any parallelism yields identical results;
    per-cell failures are recorded in the returned rows and do not stop the
    run.
    """
    return [metrics for metrics, _ in run_grid_collecting(grid, parallelism)]


def expand_grid(base: SimulationConfig, axes: dict) -> list[SimulationConfig]:
    """Cross the axis values into a cell list with derived per-cell seeds.

    ``axes`` maps config field names to value lists; the product is taken in
    the given order.  Cell ``i`` gets seed ``derive_seed(base.seed, i)``, so
    a grid is reproducible from the base seed alone.
    """
    names = list(axes)
    cells = [{}]
    for name in names:
        cells = [dict(c, **{name: v}) for c in cells for v in axes[name]]
    return [
        replace(base, seed=derive_seed(base.seed, i), **overrides)
        for i, overrides in enumerate(cells)
    ]


def _probe_power(template: SimulationConfig, n: int, replications: int, alpha: float) -> float:
    """Estimated rejection rate of the adjusted (unweighted) analysis at size n."""
    cfg = replace(template, n=n, seed=derive_seed(template.seed, n))
    rejections = 0
    for r in range(replications):
        data = generate_trial(cfg, r)
        res = analyze_procova(data, alpha=alpha)
        rejections += res.p_value < alpha
    return rejections / replications


def find_n_for_power(template: SimulationConfig, target_power: float = 0.8,
                     probe_replications: int = 2000, n_max: int = 1_000_000) -> int:
    """Smallest even sample size giving the adjusted analysis the target power.

    Bisection on even sizes against simulation-estimated power, so the
    answer is exact only up to Monte Carlo noise in the probes.

    Raises
    ------
    Unattainable
        If the target power is not reached by ``n_max``.
    """
    if not (0.5 < target_power < 0.99):
        raise ValueError(f"target power must be in (0.5, 0.99), got {target_power}")
    if template.beta1 == 0.0:
        raise ValueError("template must have a nonzero treatment effect")
    alpha = template.alpha
    lo = 10
    if _probe_power(template, lo, probe_replications, alpha) >= target_power:
        return lo
    hi = lo
    while True:
        hi *= 2
        if hi > n_max:
            raise Unattainable(f"power {target_power} not reached by n = {n_max}")
        if _probe_power(template, hi, probe_replications, alpha) >= target_power:
            break
    while hi - lo > 2:
        mid = (lo + hi) // 2
        mid -= mid % 2
        if _probe_power(template, mid, probe_replications, alpha) >= target_power:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class MainEffect:
    factor: str
    metric: str
    slope: float
    se: float
    p_value: float


def regression_on_metrics(rows, factor: str, metric: str = "type1_or_power") -> MainEffect:
    """Main effect of one grid factor on a cell-level metric.

    Ordinary least squares of the metric on (1, factor) across cells, with a
    classic t-test on the slope.
    """
    rows = [r for r in rows if r.ok]
    if len(rows) < 3:
        raise ValueError("need at least 3 usable cells for a main-effect regression")
    x = np.array([float(getattr(r.config, factor)) for r in rows])
    y = np.array([float(getattr(r, metric)) for r in rows])
    if np.ptp(x) == 0.0:
        raise ConstantFactor(f"factor {factor!r} takes a single value across cells")
    if np.ptp(y) == 0.0:
        # A strictly flat metric carries no information about the factor.
        return MainEffect(factor=factor, metric=metric, slope=0.0, se=0.0, p_value=1.0)
    X = np.column_stack([np.ones(x.size), x])
    fit = fit_ols(X, y)
    se = math.sqrt(classic_covariance(fit, X)[1, 1])
    slope = float(fit.beta_hat[1])
    if se == 0.0:
        p_value = 1.0 if slope == 0.0 else 0.0
    else:
        p_value = 2.0 * float(stats.t.sf(abs(slope) / se, x.size - 2))
    return MainEffect(factor=factor, metric=metric, slope=slope, se=se, p_value=p_value)
