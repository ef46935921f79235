import numpy as np
import pytest
from numpy.testing import assert_allclose

from wprocova.errors import DegenerateTwinVariance
from wprocova.regress import hat_matrix
from wprocova.theory import (
    EULER_MASCHERONI,
    LOG_CHI2_MEAN,
    LOG_CHI2_VARIANCE,
    asymptotic_sandwich,
    expected_gamma,
    gamma_variance_mc,
    log_linear_variance,
    prop3_limit_check,
    residual_moments,
    residual_variances,
    sample_joint,
    trial_design_generator,
    variance_reduction_eta,
)

from conftest import random_design


def batch_means(values, n_batches=100):
    """Mean and Monte Carlo SE of the mean via batching (axis 0 = draws)."""
    batches = np.array_split(values, n_batches, axis=0)
    per_batch = np.array([b.mean(axis=0) for b in batches])
    return per_batch.mean(axis=0), per_batch.std(axis=0, ddof=1) / np.sqrt(n_batches)


def heteroskedastic_case(rng, n=8, k=3):
    V = random_design(rng, n, k)
    sigma2 = rng.uniform(0.3, 4.0, size=n)
    return V, sigma2


def test_homoskedastic_variance_collapse(rng):
    V = random_design(rng, 10, 3)
    mom = residual_moments(V, np.full(10, 1.7))
    h = np.diag(hat_matrix(V))
    assert_allclose(mom.variances, 1.7 * (1.0 - h), atol=1e-12)


def test_homoskedastic_projection_identity(rng):
    V = random_design(rng, 15, 4)
    H = hat_matrix(V)
    h = np.diag(H)
    off = (H**2).sum(axis=1) - h**2
    assert_allclose((1.0 - h) ** 2 + off, 1.0 - h, atol=1e-10)


def test_moments_match_explicit_triple_product(rng):
    for n in (8, 25, 50):
        V = random_design(rng, n, 3)
        sigma2 = rng.uniform(0.2, 5.0, size=n)
        mom = residual_moments(V, sigma2)
        H = hat_matrix(V)
        oracle = (np.eye(n) - H) @ np.diag(sigma2) @ (np.eye(n) - H)
        assert np.abs(mom.covariances - oracle).max() < 1e-10
        assert np.abs(mom.variances - np.diag(oracle)).max() < 1e-10
        assert np.abs(residual_variances(V, sigma2) - np.diag(oracle)).max() < 1e-10


def test_residual_covariance_monte_carlo_oracle(rng):
    V, sigma2 = heteroskedastic_case(rng)
    n = sigma2.size
    mom = residual_moments(V, sigma2)
    H = hat_matrix(V)
    draws = 400_000
    eps = rng.normal(size=(draws, n)) * np.sqrt(sigma2)
    resid = eps @ (np.eye(n) - H).T

    prods = resid[:, :, None] * resid[:, None, :]
    emp_cov, se_cov = batch_means(prods)
    assert (np.abs(emp_cov - mom.covariances) < 3 * np.maximum(se_cov, 1e-12)).all()

    sq = resid**2
    sq_centered = sq - mom.variances
    sq_prods = sq_centered[:, :, None] * sq_centered[:, None, :]
    emp_sq, se_sq = batch_means(sq_prods)
    assert (np.abs(emp_sq - mom.sq_covariances) < 3 * np.maximum(se_sq, 1e-12)).all()


def test_log_squared_residual_moments(rng):
    V, sigma2 = heteroskedastic_case(rng)
    n = sigma2.size
    mom = residual_moments(V, sigma2)
    H = hat_matrix(V)
    draws = 400_000
    eps = rng.normal(size=(draws, n)) * np.sqrt(sigma2)
    logsq = np.log((eps @ (np.eye(n) - H).T) ** 2)
    emp_mean, se_mean = batch_means(logsq)
    assert (np.abs(emp_mean - mom.log_sq_means) < 3 * se_mean).all()
    batches = np.array_split(logsq, 100, axis=0)
    per_batch_var = np.array([b.var(axis=0, ddof=1) for b in batches])
    emp_var = per_batch_var.mean(axis=0)
    se_var = per_batch_var.std(axis=0, ddof=1) / 10.0
    assert (np.abs(emp_var - LOG_CHI2_VARIANCE) < 3 * se_var).all()


def test_log_chi2_constants():
    assert LOG_CHI2_MEAN == pytest.approx(-(EULER_MASCHERONI + np.log(2.0)), abs=1e-15)
    assert LOG_CHI2_MEAN == pytest.approx(-1.27036284546, abs=1e-10)
    rng = np.random.default_rng(99)
    total = 10_000_000
    acc = acc2 = 0.0
    count = 0
    while count < total:
        chunk = min(1_000_000, total - count)
        z2 = np.log(rng.standard_normal(chunk) ** 2)
        acc += z2.sum()
        acc2 += (z2**2).sum()
        count += chunk
    mean = acc / total
    var = acc2 / total - mean**2
    assert abs(mean - LOG_CHI2_MEAN) < 0.005
    assert abs(var - LOG_CHI2_VARIANCE) < 0.02


def test_expected_gamma_matches_simulation(rng):
    n = 20
    V = random_design(rng, n, 3)
    sigma2 = rng.uniform(0.3, 3.0, size=n)
    log_s2 = rng.normal(0.0, 1.0, size=n)
    g0, g1 = expected_gamma(V, log_s2, sigma2)

    H = hat_matrix(V)
    draws = 100_000
    eps = rng.normal(size=(draws, n)) * np.sqrt(sigma2)
    logsq = np.log((eps @ (np.eye(n) - H).T) ** 2)
    U = np.column_stack([np.ones(n), log_s2])
    coef = np.linalg.solve(U.T @ U, U.T)
    gammas = logsq @ coef.T  # draws x 2
    mean = gammas.mean(axis=0)
    se = gammas.std(axis=0, ddof=1) / np.sqrt(draws)
    assert abs(mean[0] - g0) < 3 * se[0]
    assert abs(mean[1] - g1) < 3 * se[1]


def test_expected_gamma_homoskedastic_balanced_design():
    rng = np.random.default_rng(1)
    n = 200
    V = random_design(rng, n, 3)
    log_s2 = rng.normal(size=n)
    g0, g1 = expected_gamma(V, log_s2, np.full(n, 2.0))
    assert abs(g1) < 0.05
    # Intercept carries the log chi-square shift around log of the scale.
    assert abs(g0 - (np.log(2.0) + LOG_CHI2_MEAN)) < 0.1


def test_expected_gamma_degenerate(rng):
    V = random_design(rng, 10, 2)
    with pytest.raises(DegenerateTwinVariance):
        expected_gamma(V, np.zeros(10), np.ones(10))


def test_log_chi2_linear_combination_variance(rng):
    # For independent draws, Var(sum c_i log Z_i^2) = (pi^2/2) * sum c_i^2.
    c = np.array([0.5, -1.0, 2.0])
    draws = 1_000_000
    z = rng.standard_normal((draws, 3))
    combo = np.log(z**2) @ c
    expected = LOG_CHI2_VARIANCE * (c**2).sum()
    assert abs(combo.var(ddof=1) / expected - 1.0) < 0.02


def test_gamma_variance_mc_near_independent_case(rng):
    # Small-leverage design: residual correlations are near zero, so the
    # coefficient variances approach the independent-draw closed form.
    n = 400
    V = random_design(rng, n, 2)
    log_s2 = rng.normal(0.0, 1.0, size=n)
    sigma2 = np.full(n, 1.0)
    v0, v1 = gamma_variance_mc(V, log_s2, sigma2, draws=200_000, seed=4)
    U = np.column_stack([np.ones(n), log_s2])
    closed = LOG_CHI2_VARIANCE * np.diag(np.linalg.inv(U.T @ U))
    assert abs(v0 / closed[0] - 1.0) < 0.05
    assert abs(v1 / closed[1] - 1.0) < 0.05


def test_gamma_variance_mc_scale_property(rng):
    n = 20
    V = random_design(rng, n, 3)
    sigma2 = rng.uniform(0.5, 2.0, size=n)
    log_s2 = rng.normal(0.0, 1.0, size=n)
    center = log_s2.mean()
    doubled = center + 2.0 * (log_s2 - center)
    _, v1 = gamma_variance_mc(V, log_s2, sigma2, draws=100_000, seed=11)
    _, v1_doubled = gamma_variance_mc(V, doubled, sigma2, draws=100_000, seed=11)
    assert np.sqrt(v1_doubled) / np.sqrt(v1) == pytest.approx(0.5, abs=0.02)


def test_gamma_variance_mc_matches_end_to_end_fits(rng):
    n = 20
    V = random_design(rng, n, 3)
    sigma2 = rng.uniform(0.3, 3.0, size=n)
    log_s2 = rng.normal(0.0, 1.0, size=n)
    v0, v1 = gamma_variance_mc(V, log_s2, sigma2, draws=100_000, seed=3)

    H = hat_matrix(V)
    draws = 100_000
    eps = rng.normal(size=(draws, n)) * np.sqrt(sigma2)
    logsq = np.log((eps @ (np.eye(n) - H).T) ** 2)
    U = np.column_stack([np.ones(n), log_s2])
    coef = np.linalg.solve(U.T @ U, U.T)
    gammas = logsq @ coef.T
    emp = gammas.var(axis=0, ddof=1)
    assert abs(v0 / emp[0] - 1.0) < 0.05
    assert abs(v1 / emp[1] - 1.0) < 0.05


def test_gamma_variance_mc_deterministic(rng):
    n = 12
    V = random_design(rng, n, 2)
    sigma2 = rng.uniform(0.5, 2.0, size=n)
    log_s2 = rng.normal(size=n)
    a = gamma_variance_mc(V, log_s2, sigma2, draws=20_000, seed=8)
    b = gamma_variance_mc(V, log_s2, sigma2, draws=20_000, seed=8)
    assert a == b


def test_sandwich_unit_weights_equal_unweighted():
    sample = sample_joint(20_000, gamma0=0.3, gamma1=1.0, psi_sq=0.5, seed=2)
    sw = asymptotic_sandwich(sample, lambda s2: np.ones_like(s2))
    assert_allclose(sw.wprocova_cov, sw.procova_cov, atol=1e-12)


def test_sandwich_constant_variance_no_gain():
    sample = sample_joint(20_000, gamma0=0.0, gamma1=1.0, psi_sq=0.0, seed=3)
    flat = sample.__class__(sample.treatment, sample.prognostic_score,
                            sample.twin_variance, np.full(sample.size, 1.3))
    sw = asymptotic_sandwich(flat, log_linear_variance(0.0, 0.0))
    assert sw.treatment_variance_ratio == pytest.approx(1.0, abs=1e-10)


def test_eta_constant_weights_is_zero():
    sample = sample_joint(50_000, gamma0=0.2, gamma1=1.0, psi_sq=1.0, seed=5)
    eta = variance_reduction_eta(sample, log_linear_variance(0.7, 0.0))
    assert eta == pytest.approx(0.0, abs=1e-12)


def test_eta_independent_variances_matches_sandwich_penalty():
    # Weights driven by twin variances unrelated to the true variances cost
    # efficiency: the reduction is 1 - E[G^-2]/(E[G^-1])^2 <= 0, and the
    # moment identity still reproduces the sandwich ratio.
    sample = sample_joint(400_000, gamma0=0.0, gamma1=0.0, psi_sq=0.5, seed=6)
    G = log_linear_variance(0.0, 1.0)
    eta = variance_reduction_eta(sample, G)
    sw = asymptotic_sandwich(sample, G)
    assert eta <= 0.0
    assert abs(eta - (1.0 - sw.treatment_variance_ratio)) < 0.01
    assert eta == pytest.approx(1.0 - np.exp(0.5), abs=0.02)  # tau2_sq = 0.5


def test_eta_matches_sandwich_ratio():
    sample = sample_joint(400_000, gamma0=0.0, gamma1=1.0, psi_sq=1.0, seed=7)
    G = log_linear_variance(0.0, 1.0)
    eta = variance_reduction_eta(sample, G)
    sw = asymptotic_sandwich(sample, G)
    assert abs(eta - (1.0 - sw.treatment_variance_ratio)) < 0.005
    assert eta == pytest.approx(1.0 - np.exp(-0.5), abs=0.01)


def test_prop3_homoskedastic_limit():
    gen = trial_design_generator(gamma0=0.4, gamma1=0.0, psi_sq=0.0)
    rows = prop3_limit_check(gen, [100, 400, 2000], seed=1)
    assert abs(rows[-1].expected_gamma1) < 0.01
    assert abs(rows[-1].limit_gamma1) < 0.01


def test_prop3_gap_shrinks(rng):
    gen = trial_design_generator(gamma0=0.0, gamma1=1.0, psi_sq=1.0)
    rows = prop3_limit_check(gen, [50, 200, 800, 3200], seed=12)
    gaps = [row.gap_gamma1 for row in rows]
    # Allow sampling noise: the trend holds between the ends of the grid.
    assert gaps[-1] < gaps[0]
    assert gaps[-1] < 0.05


def test_prop3_slope_limit_tracks_generating_slope():
    gen = trial_design_generator(gamma0=-0.5, gamma1=1.2, psi_sq=0.5)
    rows = prop3_limit_check(gen, [2000], seed=9)
    assert rows[0].limit_gamma1 == pytest.approx(1.2, abs=0.1)


def test_draw_count_guards(rng):
    V = random_design(rng, 10, 2)
    with pytest.raises(ValueError):
        gamma_variance_mc(V, rng.normal(size=10), np.ones(10), draws=100)
    with pytest.raises(ValueError):
        asymptotic_sandwich(sample_joint(100, 0.0, 1.0, 1.0), log_linear_variance(0.0, 1.0))
