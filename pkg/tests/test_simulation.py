import math
from dataclasses import replace

import numpy as np
import pytest

from wprocova.errors import ConstantFactor, InvalidScenarioParams, Unattainable
from wprocova.rng import derive_seed, substream
from wprocova.simulation import (
    SimulationConfig,
    TOTAL_LOG_VARIANCE,
    expand_grid,
    find_n_for_power,
    generate_trial,
    regression_on_metrics,
    run_cell,
    run_grid,
    simulate_cell,
)
from wprocova.theory import LOG_CHI2_VARIANCE


def nan_equal(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return (math.isnan(a) and math.isnan(b)) or a == b
    return a == b


def metrics_equal(x, y):
    if x.config != y.config or x.ok != y.ok:
        return False
    for f in ("bias", "type1_or_power", "coverage", "mean_pct_var_reduction",
              "median_pct_var_reduction", "var_inflation_prob"):
        if not nan_equal(getattr(x, f), getattr(y, f)):
            return False
    return x.methods == y.methods


def test_substream_determinism():
    a = substream(5, 1, 2).standard_normal(8)
    b = substream(5, 1, 2).standard_normal(8)
    assert np.array_equal(a, b)
    c = substream(5, 1, 3).standard_normal(8)
    assert not np.array_equal(a, c)
    assert derive_seed(5, 0) == derive_seed(5, 0)
    assert derive_seed(5, 0) != derive_seed(5, 1)


def test_generate_trial_is_deterministic():
    cfg = SimulationConfig(n=50, scenario="fixed_noise", gamma1=0.8, seed=17,
                           replications=100)
    a = generate_trial(cfg, 3)
    b = generate_trial(cfg, 3)
    for f in ("treatment", "outcome", "prognostic_score", "twin_variance"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = generate_trial(cfg, 4)
    assert not np.array_equal(a.outcome, c.outcome)


def test_generate_trial_exact_arm_split():
    cfg = SimulationConfig(n=100, seed=3, replications=100)
    for r in range(5):
        data = generate_trial(cfg, r)
        assert data.treatment.sum() == 50


def test_homoskedastic_degeneration():
    # No variance signal anywhere: outcome variance collapses to exp(gamma0).
    cfg = SimulationConfig(n=10_000, scenario="deterministic", gamma0=0.7,
                           gamma1=0.0, gamma2=0.0, seed=23, replications=100)
    data = generate_trial(cfg, 0)
    expected = math.exp(0.7)
    assert abs(data.outcome.var(ddof=1) / expected - 1.0) < 0.02


def test_pure_shift_centers_on_effect():
    cfg = SimulationConfig(n=400, scenario="deterministic", beta1=0.4, beta2=0.0,
                           gamma0=-1.0, gamma1=0.0, tau1_sq=1e-12, seed=29,
                           replications=100)
    diffs = []
    for r in range(200):
        data = generate_trial(cfg, r)
        diffs.append(data.outcome[data.treatment == 1].mean()
                     - data.outcome[data.treatment == 0].mean())
    diffs = np.array(diffs)
    sem = diffs.std(ddof=1) / np.sqrt(diffs.size)
    assert abs(diffs.mean() - 0.4) < 3 * sem


def test_deterministic_scenario_variance_identity():
    cfg = SimulationConfig(n=200_000, scenario="deterministic", gamma0=0.3,
                           gamma1=1.2, gamma2=0.0, tau2_sq=0.5, seed=5,
                           replications=100)
    data = generate_trial(cfg, 0)
    log_sigma2 = cfg.gamma0 + cfg.gamma1 * np.log(data.twin_variance)
    target = cfg.gamma1**2 * cfg.tau2_sq
    assert abs(log_sigma2.var(ddof=1) / target - 1.0) < 0.02


def test_fixed_total_scenario_variance_identity():
    # Recover Var(log sigma2) from the outcomes: log eps^2 is log sigma2 plus
    # an independent log chi-square term with variance pi^2/2.
    for gamma1 in (0.4, 1.4):
        cfg = SimulationConfig(n=200_000, scenario="fixed_total", gamma0=-1.75,
                               gamma1=gamma1, beta1=0.0, beta2=0.0, tau2_sq=0.5,
                               seed=37, replications=100)
        data = generate_trial(cfg, 0)
        log_eps_sq = np.log(data.outcome**2)
        est = log_eps_sq.var(ddof=1) - LOG_CHI2_VARIANCE
        assert abs(est - TOTAL_LOG_VARIANCE) < 0.03 * TOTAL_LOG_VARIANCE


def test_fixed_total_requires_headroom():
    cfg = SimulationConfig(n=50, scenario="fixed_total", gamma1=3.0, tau2_sq=0.5,
                           replications=100)
    with pytest.raises(InvalidScenarioParams):
        generate_trial(cfg, 0)


def test_psi_sq_override_must_match_scenario():
    cfg = SimulationConfig(n=50, scenario="deterministic", psi_sq=1.0, replications=100)
    with pytest.raises(InvalidScenarioParams):
        cfg.validate()
    ok = SimulationConfig(n=50, scenario="fixed_noise", psi_sq=1.0, replications=100)
    ok.validate()


def test_odd_n_rejected():
    with pytest.raises(InvalidScenarioParams):
        SimulationConfig(n=51, replications=100).validate()


def test_run_cell_smoke_and_fields():
    cfg = SimulationConfig(n=60, scenario="fixed_noise", gamma1=1.0, beta2=0.4,
                           seed=13, replications=120)
    m = run_cell(cfg)
    assert m.ok and m.error_count == 0
    assert 0.0 <= m.type1_or_power <= 1.0
    assert 0.0 <= m.coverage <= 1.0
    assert 0.0 <= m.var_inflation_prob <= 1.0
    assert set(m.methods) == {"unadjusted", "procova", "wprocova"}
    assert np.isfinite(m.mean_pct_var_reduction)


def test_run_grid_singleton_identical_to_run_cell():
    cfg = SimulationConfig(n=50, scenario="fixed_noise", gamma1=0.6, seed=19,
                           replications=100)
    assert metrics_equal(run_grid([cfg])[0], run_cell(cfg))


def test_run_grid_parallelism_invariance():
    grid = [
        SimulationConfig(n=50, scenario="fixed_noise", gamma1=g, seed=derive_seed(77, i),
                         replications=100)
        for i, g in enumerate((0.0, 0.8, 1.4))
    ]
    serial = run_grid(grid, parallelism=1)
    parallel = run_grid(grid, parallelism=2)
    assert all(metrics_equal(a, b) for a, b in zip(serial, parallel))


def test_run_grid_records_cell_failures():
    bad = SimulationConfig(n=50, scenario="fixed_total", gamma1=3.0, tau2_sq=0.5,
                           replications=100)
    good = SimulationConfig(n=50, scenario="fixed_noise", gamma1=0.5, seed=2,
                            replications=100)
    rows = run_grid([bad, good])
    assert not rows[0].ok and rows[0].failure
    assert rows[1].ok


def test_expand_grid_cardinality_and_seeds():
    base = SimulationConfig(n=50, seed=123, replications=100)
    cells = expand_grid(base, {"n": [50, 100], "gamma1": [0.4, 1.0, 1.4]})
    assert len(cells) == 6
    assert [c.n for c in cells] == [50, 50, 50, 100, 100, 100]
    assert len({c.seed for c in cells}) == 6
    assert cells[0].seed == derive_seed(123, 0)


def test_find_n_for_power_matches_analytic_scaling():
    # Homoskedastic case: required n follows the normal power curve, and
    # doubling the effect shrinks it by about a factor of four.
    base = SimulationConfig(n=50, scenario="deterministic", gamma0=0.0, gamma1=0.0,
                            beta1=0.3, beta2=0.5, seed=41, replications=100)
    n_small = find_n_for_power(base, target_power=0.8, probe_replications=1500)
    n_large = find_n_for_power(replace(base, beta1=0.6), target_power=0.8,
                               probe_replications=1500)
    snr = 1.959964 + 0.841621  # two-sided 5% level at 80% power
    analytic = 4.0 * 1.0 * snr**2 / 0.3**2
    assert abs(n_small - analytic) / analytic < 0.2
    ratio = n_small / n_large
    assert 2.8 < ratio < 5.5


def test_find_n_for_power_saturated_returns_lower_bracket():
    base = SimulationConfig(n=50, scenario="deterministic", gamma0=-3.0, gamma1=0.0,
                            beta1=5.0, seed=43, replications=100)
    assert find_n_for_power(base, target_power=0.51, probe_replications=300) == 10


def test_find_n_for_power_unattainable():
    base = SimulationConfig(n=50, scenario="deterministic", gamma0=2.0, gamma1=0.0,
                            beta1=1e-4, seed=47, replications=100)
    with pytest.raises(Unattainable):
        find_n_for_power(base, target_power=0.9, probe_replications=100, n_max=200)


def test_find_n_for_power_argument_guards():
    base = SimulationConfig(n=50, beta1=0.0, replications=100)
    with pytest.raises(ValueError):
        find_n_for_power(base)
    with pytest.raises(ValueError):
        find_n_for_power(replace(base, beta1=0.4), target_power=0.3)


def test_regression_on_metrics_flat_and_linear():
    base = SimulationConfig(n=50, seed=1, replications=100)
    rows = run_grid(expand_grid(base, {"gamma1": [0.0, 0.5, 1.0, 1.5]}))
    flat = regression_on_metrics(rows, "gamma1", metric="replications_used")
    assert flat.slope == pytest.approx(0.0, abs=1e-9)
    assert flat.p_value == pytest.approx(1.0, abs=1e-9)

    for i, r in enumerate(rows):
        r.bias = 0.01 * r.config.gamma1 + (1e-6 if i % 2 else -1e-6)
    effect = regression_on_metrics(rows, "gamma1", metric="bias")
    assert effect.slope == pytest.approx(0.01, abs=1e-4)
    assert effect.p_value < 0.01

    with pytest.raises(ConstantFactor):
        regression_on_metrics(rows, "n", metric="bias")


def test_simulate_cell_counts_replication_errors():
    # Degenerate twin variances in every replication: the cell must report
    # the failures without raising.
    cfg = SimulationConfig(n=50, scenario="deterministic", gamma1=0.0,
                           tau2_sq=1e-13, seed=3, replications=100)
    draws = simulate_cell(cfg)
    assert draws.error_count == 100
    m = run_cell(cfg)
    assert not m.ok and m.replications_used == 0


def test_procova_unbiased_at_null_grid_point():
    # Setting with a substantial unexplained variance share and a null
    # effect: the adjusted analysis stays unbiased to Monte Carlo error.
    cfg = SimulationConfig(n=300, scenario="fixed_total", gamma0=-1.75, gamma1=1.0,
                           beta1=0.0, beta2=0.4, tau2_sq=0.5, replications=2000,
                           seed=derive_seed(606, 0))
    m = run_cell(cfg)
    s = m.methods["procova"]
    assert abs(s.bias) < 3.0 * s.sd_estimate / math.sqrt(m.replications_used)


def test_coverage_band_across_sample_sizes():
    # Reduced null grid spanning the sample-size range at 500 reps/cell:
    # every cell's coverage stays in a generous band around the 95% target.
    base = SimulationConfig(n=50, scenario="fixed_total", gamma0=-1.75, beta1=0.0,
                            tau2_sq=0.5, replications=500, seed=909)
    cells = expand_grid(base, {"n": [50, 100, 1000], "beta2": [0.2, 0.6],
                               "gamma1": [0.4, 1.4]})
    rows = run_grid(cells, parallelism=2)
    assert all(r.ok for r in rows)
    for r in rows:
        assert 0.90 <= r.coverage <= 0.98


def test_main_effect_of_n_on_bias_is_null():
    base = SimulationConfig(n=50, scenario="fixed_total", gamma0=-1.75, gamma1=1.0,
                            beta1=0.0, beta2=0.4, tau2_sq=0.5, replications=500,
                            seed=1212)
    rows = run_grid(expand_grid(base, {"n": [50, 100, 300, 1000]}), parallelism=2)
    effect = regression_on_metrics(rows, "n", metric="bias")
    assert abs(effect.slope) < 3.0 * effect.se
    assert effect.p_value > 0.001


def test_main_effect_of_variance_slope_on_type1():
    # The rejection rate creeps up slightly with the variance-model slope;
    # the estimated main effect sits near that small positive value.
    base = SimulationConfig(n=300, scenario="fixed_total", gamma0=-1.75, beta1=0.0,
                            beta2=0.4, tau2_sq=0.5, replications=2000, seed=1515)
    rows = run_grid(expand_grid(base, {"gamma1": [0.4, 1.0, 1.4]}), parallelism=2)
    effect = regression_on_metrics(rows, "gamma1", metric="type1_or_power")
    assert abs(effect.slope - 0.004) < 2.0 * max(effect.se, 1e-6)
