"""Closed-form moment oracles for residual-based variance modeling.

These functions evaluate, exactly or by seeded Monte Carlo, the quantities
that the rest of the package is tested against:

- moments of least-squares residuals (and their squares and log squares)
  under per-observation variances;
- expectations and Monte Carlo variances of the variance-model coefficient
  estimators computed from those residuals;
- asymptotic covariance matrices of the weighted and unweighted adjusted
  analyses, and the variance-reduction summary they imply.

Everything here is deterministic for a fixed seed and draw count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTwinVariance,
    DimensionMismatch,
    NonPSDCovariance,
    SingularBread,
)
from .regress import hat_matrix, _qr
from .rng import substream

#: Euler-Mascheroni constant, 20 significant digits.
EULER_MASCHERONI = 0.57721566490153286061

#: Mean of log(Z^2) for standard normal Z: -(EULER_MASCHERONI + log 2).
LOG_CHI2_MEAN = -(EULER_MASCHERONI + math.log(2.0))

#: Variance of log(Z^2) for standard normal Z: pi^2 / 2.
LOG_CHI2_VARIANCE = math.pi**2 / 2.0

_MC_CHUNK = 1 << 16
_EIG_CLIP = -1e-8


@dataclass(frozen=True)
class ResidualMoments:
    """Exact conditional moments of least-squares residuals.

    variances : Var(e_i) = (1 - h_ii)^2 s2_i + sum_{k != i} h_ik^2 s2_k.
    covariances : Cov(e_i, e_j); symmetric with ``variances`` on the diagonal.
    sq_covariances : Cov(e_i^2, e_j^2) = 2 * Cov(e_i, e_j)^2.
    log_sq_means : E[log(e_i^2)] = log(Var(e_i)) - (EULER_MASCHERONI + log 2).
    log_sq_variance : Var(log(e_i^2)) = pi^2 / 2, the same for every i.
    """

    variances: np.ndarray
    covariances: np.ndarray
    sq_covariances: np.ndarray
    log_sq_means: np.ndarray
    log_sq_variance: float = LOG_CHI2_VARIANCE


def _check_sigma2(sigma2, n):
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != (n,):
        raise DimensionMismatch(f"sigma2 must have shape ({n},), got {sigma2.shape}")
    if not np.isfinite(sigma2).all() or (sigma2 <= 0.0).any():
        raise DimensionMismatch("per-observation variances must be positive and finite")
    return sigma2


def residual_moments(V, sigma2) -> ResidualMoments:
    """Evaluate the residual moment formulas on a design with known variances.

    Forms the full projection matrix, so this is intended for small designs;
    use :func:`residual_variances` when only the diagonal is needed.
    """
    V = np.asarray(V, dtype=float)
    H = hat_matrix(V)
    n = H.shape[0]
    sigma2 = _check_sigma2(sigma2, n)
    h = np.diag(H)
    # P[i, j] = sum_k h_ik h_jk s2_k
    P = (H * sigma2) @ H
    variances = (1.0 - h) ** 2 * sigma2 + (np.diag(P) - h**2 * sigma2)
    # Off-diagonal: sum_{k != i,j} h_ik h_jk s2_k - h_ij (1-h_ii) s2_i - h_ij (1-h_jj) s2_j
    cross = P - np.outer(h * sigma2, np.ones(n)) * H - H * np.outer(np.ones(n), h * sigma2)
    cov = cross - H * sigma2[None, :] * (1.0 - h)[None, :] - H * sigma2[:, None] * (1.0 - h)[:, None]
    np.fill_diagonal(cov, variances)
    sq_cov = 2.0 * cov**2
    log_sq_means = np.log(variances) + LOG_CHI2_MEAN
    return ResidualMoments(
        variances=variances,
        covariances=cov,
        sq_covariances=sq_cov,
        log_sq_means=log_sq_means,
    )


def residual_variances(V, sigma2) -> np.ndarray:
    """Diagonal of the residual covariance without forming the projection matrix.

    Uses Var(e_i) = s2_i - 2 h_ii s2_i + q_i' (Q' diag(s2) Q) q_i with Q the
    orthonormal factor of the design, so large designs stay O(n k^2).
    """
    V = np.asarray(V, dtype=float)
    n = V.shape[0]
    sigma2 = _check_sigma2(sigma2, n)
    Q, _ = _qr(V)
    h = np.einsum("ij,ij->i", Q, Q)
    S = Q.T @ (Q * sigma2[:, None])
    quad = np.einsum("ij,jk,ik->i", Q, S, Q)
    return sigma2 - 2.0 * h * sigma2 + quad


def _log_s2_design(log_s2):
    log_s2 = np.asarray(log_s2, dtype=float)
    if log_s2.ndim != 1:
        raise DimensionMismatch("log twin variances must be a 1-d array")
    if float(np.var(log_s2, ddof=1)) <= 1e-12:
        raise DegenerateTwinVariance("log twin variances are constant")
    return log_s2


def expected_gamma(V, log_s2, sigma2) -> tuple[float, float]:
    """Exact conditional expectations of the variance-model coefficients.

    The slope expectation is the regression slope of ``log Var(e_i)`` on the
    log twin variances; the intercept expectation is the corresponding
    intercept shifted by ``-(EULER_MASCHERONI + log 2)``, the mean of a log
    chi-square(1) variable.
    """
    log_s2 = _log_s2_design(log_s2)
    log_var = np.log(residual_variances(V, sigma2))
    if log_s2.shape != log_var.shape:
        raise DimensionMismatch("log twin variances must match the design rows")
    lbar = log_s2.mean()
    dx = log_s2 - lbar
    slope = float(dx @ log_var) / float(dx @ dx)
    intercept = float(log_var.mean()) - slope * lbar
    return intercept + LOG_CHI2_MEAN, slope


def gamma_variance_mc(V, log_s2, sigma2, draws: int, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo variances of the variance-model coefficient estimators.

    Samples the correlated standard-normal vector whose squares drive the
    log-squared-residual regression (covariance given by
    :func:`residual_moments`, factorized by symmetric eigendecomposition) and
    evaluates the coefficient quadratic forms on each draw.  There is no
    closed form for the cross-moments of correlated log chi-square variables,
    so Monte Carlo is the reference here.

    Raises
    ------
    NonPSDCovariance
        If the residual correlation matrix has an eigenvalue below -1e-8;
        eigenvalues in [-1e-8, 0) are clipped to zero.
    """
    if draws < 10_000:
        raise ValueError(f"need at least 10^4 draws for a stable estimate, got {draws}")
    log_s2 = _log_s2_design(log_s2)
    mom = residual_moments(V, sigma2)
    n = mom.variances.shape[0]
    if log_s2.shape != (n,):
        raise DimensionMismatch("log twin variances must match the design rows")
    scale = 1.0 / np.sqrt(mom.variances)
    corr = mom.covariances * np.outer(scale, scale)
    eigvals, eigvecs = np.linalg.eigh(corr)
    if eigvals.min() < _EIG_CLIP:
        raise NonPSDCovariance(f"residual correlation has eigenvalue {eigvals.min():.3e}")
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))

    U = np.column_stack([np.ones(n), log_s2])
    coef = np.linalg.solve(U.T @ U, U.T)  # 2 x n

    rng = substream(seed)
    total = 0
    acc = np.zeros(2)
    acc_sq = np.zeros(2)
    while total < draws:
        chunk = min(_MC_CHUNK, draws - total)
        z = factor @ rng.standard_normal((n, chunk))
        g = coef @ np.log(np.maximum(z**2, 1e-300))
        acc += g.sum(axis=1)
        acc_sq += (g**2).sum(axis=1)
        total += chunk
    var = (acc_sq - acc**2 / total) / (total - 1)
    return float(var[0]), float(var[1])


@dataclass(frozen=True)
class JointSample:
    """Draws of (treatment, prognostic score, twin variance, true variance)
    from the joint super-population distribution."""

    treatment: np.ndarray
    prognostic_score: np.ndarray
    twin_variance: np.ndarray
    sigma2: np.ndarray

    @property
    def size(self) -> int:
        return self.treatment.shape[0]


def sample_joint(draws: int, gamma0: float, gamma1: float, psi_sq: float,
                 tau1_sq: float = 1.0, tau2_sq: float = 0.5,
                 seed: int = 0) -> JointSample:
    """Independence construction for the asymptotic calculations.

    Treatment is Bernoulli(1/2), the prognostic score is normal, and
    ``log sigma2 = gamma0 + gamma1 * log s2 + zeta`` with ``log s2`` and
    ``zeta`` independent normals.  By construction the variances and
    weights are independent of the mean-model predictors.
    """
    rng = substream(seed)
    w = (rng.random(draws) < 0.5).astype(float)
    m = rng.normal(0.0, math.sqrt(tau1_sq), draws)
    log_s2 = rng.normal(0.0, math.sqrt(tau2_sq), draws)
    zeta = rng.normal(0.0, math.sqrt(psi_sq), draws) if psi_sq > 0 else np.zeros(draws)
    sigma2 = np.exp(gamma0 + gamma1 * log_s2 + zeta)
    return JointSample(w, m, np.exp(log_s2), sigma2)


def log_linear_variance(gamma0: float, gamma1: float):
    """Variance function ``s2 -> exp(gamma0) * s2**gamma1`` as a callable."""

    def G(s2):
        return np.exp(gamma0 + gamma1 * np.log(s2))

    return G


@dataclass(frozen=True)
class AsymptoticSandwich:
    """Moment matrices of the weighted analysis and both asymptotic covariances.

    ``wprocova_cov`` is ``bread^{-1} meat bread^{-1}``; ``procova_cov`` is the
    corresponding unweighted sandwich.  The (1, 1) entries (treatment
    coefficient) carry the variance comparison.
    """

    omega_bread: np.ndarray
    omega_meat: np.ndarray
    procova_cov: np.ndarray
    wprocova_cov: np.ndarray

    @property
    def treatment_variance_ratio(self) -> float:
        return float(self.wprocova_cov[1, 1] / self.procova_cov[1, 1])


def _moment_matrix(X, c):
    return (X * c[:, None]).T @ X / X.shape[0]


def asymptotic_sandwich(sample: JointSample, G) -> AsymptoticSandwich:
    """Estimate the asymptotic covariance matrices by sample averages.

    ``G`` maps twin variances to the limiting fitted variance function; it
    must be strictly positive on the sample.
    """
    if sample.size < 10_000:
        raise ValueError(f"need at least 10^4 draws, got {sample.size}")
    g = np.asarray(G(sample.twin_variance), dtype=float)
    if not np.isfinite(g).all() or (g <= 0.0).any():
        raise ValueError("variance function must be strictly positive on the sample")
    X = np.column_stack([np.ones(sample.size), sample.treatment, sample.prognostic_score])
    bread = _moment_matrix(X, 1.0 / g)
    meat = _moment_matrix(X, sample.sigma2 / g**2)
    plain = _moment_matrix(X, np.ones(sample.size))
    weighted_by_sigma2 = _moment_matrix(X, sample.sigma2)
    try:
        bread_inv = np.linalg.inv(bread)
        plain_inv = np.linalg.inv(plain)
    except np.linalg.LinAlgError as err:
        raise SingularBread(f"moment matrix not invertible: {err}") from err
    return AsymptoticSandwich(
        omega_bread=bread,
        omega_meat=meat,
        procova_cov=plain_inv @ weighted_by_sigma2 @ plain_inv,
        wprocova_cov=bread_inv @ meat @ bread_inv,
    )


def variance_reduction_eta(sample: JointSample, G) -> float:
    """Variance-reduction fraction implied by the simplified moment identity.

    Returns ``1 - E[sigma2 / G^2] / ((E[1 / G])^2 * E[sigma2])``, which
    equals the treatment-coefficient ratio of the two sandwich covariances
    whenever the weights and variances are uncorrelated with the mean-model
    predictors.  The squared first moment in the denominator is what the
    sandwich algebra produces; see the equivalence test against
    :func:`asymptotic_sandwich`.
    """
    if sample.size < 10_000:
        raise ValueError(f"need at least 10^4 draws, got {sample.size}")
    g = np.asarray(G(sample.twin_variance), dtype=float)
    if not np.isfinite(g).all() or (g <= 0.0).any():
        raise ValueError("variance function must be strictly positive on the sample")
    num = float(np.mean(sample.sigma2 / g**2))
    denom = float(np.mean(1.0 / g)) ** 2 * float(np.mean(sample.sigma2))
    return 1.0 - num / denom


@dataclass(frozen=True)
class Prop3Row:
    """One sample size in a convergence check of the coefficient expectations."""

    n: int
    expected_gamma0: float
    expected_gamma1: float
    limit_gamma0: float
    limit_gamma1: float

    @property
    def gap_gamma1(self) -> float:
        return abs(self.expected_gamma1 - self.limit_gamma1)


def trial_design_generator(gamma0: float, gamma1: float, psi_sq: float,
                           tau1_sq: float = 1.0, tau2_sq: float = 0.5):
    """Design generator matching the trial analysis layout.

    Returns ``generator(n, rng) -> (V, log_s2, sigma2)`` with design columns
    (1, treatment, prognostic score), an exactly split treatment arm, and
    ``log sigma2 = gamma0 + gamma1 * log s2 + zeta``.
    """

    def generate(n, rng):
        w = np.zeros(n)
        w[rng.permutation(n)[: n // 2]] = 1.0
        m = rng.normal(0.0, math.sqrt(tau1_sq), n)
        log_s2 = rng.normal(0.0, math.sqrt(tau2_sq), n)
        zeta = rng.normal(0.0, math.sqrt(psi_sq), n) if psi_sq > 0 else np.zeros(n)
        sigma2 = np.exp(gamma0 + gamma1 * log_s2 + zeta)
        V = np.column_stack([np.ones(n), w, m])
        return V, log_s2, sigma2

    return generate


def prop3_limit_check(design_generator, n_grid, seed: int = 0) -> list[Prop3Row]:
    """Trace the coefficient expectations toward their large-sample limits.

    For each size in ``n_grid`` the exact expectations are evaluated on a
    generated design.  The limits are estimated from a reference design of
    twice the largest grid size: with ``a_i = log Var(e_i)`` and ``l_i`` the
    log twin variances, the slope limit is ``Cov(l, a) / Var(l)`` and the
    intercept limit is the matching intercept minus the log chi-square mean
    shift.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if not n_grid:
        raise ValueError("n_grid must be nonempty")

    ref_n = 2 * n_grid[-1]
    V, log_s2, sigma2 = design_generator(ref_n, substream(seed, ref_n, 1))
    log_var = np.log(residual_variances(V, sigma2))
    dx = log_s2 - log_s2.mean()
    limit_g1 = float(dx @ log_var) / float(dx @ dx)
    limit_g0 = float(log_var.mean()) - limit_g1 * float(log_s2.mean()) + LOG_CHI2_MEAN

    rows = []
    for n in n_grid:
        V, log_s2, sigma2 = design_generator(n, substream(seed, n, 0))
        g0, g1 = expected_gamma(V, log_s2, sigma2)
        rows.append(Prop3Row(n, g0, g1, limit_g0, limit_g1))
    return rows
