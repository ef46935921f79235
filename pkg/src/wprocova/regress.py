"""Least-squares kernels shared by every analysis method.

Fits are computed through a thin QR factorization so that leverages and the
rank check come from the factorization itself; explicit normal equations and
the full N x N projection matrix are never formed here.  Robust (sandwich)
covariances are computed on the weight-transformed design, which reduces to
the ordinary sandwich when the fit is unweighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonPositiveVariance, RankDeficient

# Relative threshold on |diag(R)|; below this the fit is refused rather than
# silently regularized, because coefficient identifiability is required.
RANK_TOL = 1e-10

HC_FLAVORS = ("HC0", "HC1")


@dataclass(frozen=True)
class RegressionFit:
    """Coefficients and per-observation diagnostics of a least-squares fit.

    Attributes
    ----------
    beta_hat : ndarray, shape (k,)
        Estimated coefficients.
    residuals : ndarray, shape (n,)
        ``outcome - fitted``, on the original (untransformed) scale.
    fitted : ndarray, shape (n,)
        Predicted outcomes; ``fitted + residuals`` equals the outcome vector
        exactly by construction.
    leverages : ndarray, shape (n,)
        Diagonal of the (weighted) projection matrix, each in [0, 1].
    sigma2_hat : float
        Unbiased residual variance estimate, sum of (weighted) squared
        residuals divided by ``n - k``.
    weights : ndarray or None
        Inverse variances used in the fit; ``None`` for an unweighted fit.
    """

    beta_hat: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    leverages: np.ndarray
    sigma2_hat: float
    weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.residuals.shape[0]

    @property
    def k(self) -> int:
        return self.beta_hat.shape[0]


@dataclass(frozen=True)
class SandwichCovariance:
    """Heteroskedasticity-consistent covariance of the coefficient estimates."""

    matrix: np.ndarray
    flavor: str


def _as_design(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch(f"design matrix must be 2-d, got shape {X.shape}")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise DimensionMismatch(
            f"outcome length {y.shape} does not match design rows {X.shape[0]}"
        )
    n, k = X.shape
    if n <= k:
        raise DimensionMismatch(f"need more observations than columns ({n} rows, {k} columns)")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DimensionMismatch("design matrix and outcomes must be finite")
    return X, y


def _qr(X):
    """Reduced QR with a hard rank check on the R diagonal."""
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    top = diag.max()
    if top == 0.0 or diag.min() <= RANK_TOL * top:
        raise RankDeficient("design matrix is numerically rank deficient")
    return Q, R


def fit_ols(X, y) -> RegressionFit:
    """Ordinary least squares of ``y`` on the columns of ``X``.

    Raises
    ------
    RankDeficient
        If the columns of ``X`` are numerically collinear.
    DimensionMismatch
        If shapes are incompatible or there are too few rows.
    """
    X, y = _as_design(X, y)
    n, k = X.shape
    Q, R = _qr(X)
    beta = solve_triangular(R, Q.T @ y)
    fitted = X @ beta
    residuals = y - fitted
    leverages = np.einsum("ij,ij->i", Q, Q)
    sigma2 = float(residuals @ residuals) / (n - k)
    return RegressionFit(beta, residuals, fitted, leverages, sigma2)


def fit_wls(X, y, variances) -> RegressionFit:
    """Weighted least squares with per-observation variances.

    Each row is weighted by the reciprocal of its variance, equivalent to
    ordinary least squares on the system with row ``i`` scaled by
    ``1 / sqrt(variances[i])``.  Leverages are the diagonal of the weighted
    projection matrix.

    Raises
    ------
    NonPositiveVariance
        If any variance is zero, negative, or non-finite.
    """
    X, y = _as_design(X, y)
    n, k = X.shape
    v = np.asarray(variances, dtype=float)
    if v.shape != y.shape:
        raise DimensionMismatch(f"variances shape {v.shape} does not match outcomes {y.shape}")
    if not np.isfinite(v).all() or (v <= 0.0).any():
        raise NonPositiveVariance("all variances must be strictly positive and finite")
    w = 1.0 / v
    sw = np.sqrt(w)
    Q, R = _qr(X * sw[:, None])
    beta = solve_triangular(R, Q.T @ (y * sw))
    fitted = X @ beta
    residuals = y - fitted
    leverages = np.einsum("ij,ij->i", Q, Q)
    sigma2 = float((w * residuals) @ residuals) / (n - k)
    return RegressionFit(beta, residuals, fitted, leverages, sigma2, weights=w)


def hc_covariance(fit: RegressionFit, X, flavor: str = "HC1") -> SandwichCovariance:
    """Sandwich covariance of the coefficients from ``fit``.

    For a weighted fit the sandwich is formed on the weight-transformed
    design and residuals (row ``i`` scaled by ``sqrt(weights[i])``); for an
    unweighted fit the transform is the identity.  ``HC1`` rescales the
    ``HC0`` matrix by ``n / (n - k)``.
    """
    if flavor not in HC_FLAVORS:
        raise ValueError(f"flavor must be one of {HC_FLAVORS}, got {flavor!r}")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != fit.n or X.shape[1] != fit.k:
        raise DimensionMismatch(
            f"design shape {X.shape} does not match fit with n={fit.n}, k={fit.k}"
        )
    n, k = X.shape
    if fit.weights is None:
        Xt = X
        et = fit.residuals
    else:
        sw = np.sqrt(fit.weights)
        Xt = X * sw[:, None]
        et = fit.residuals * sw
    Q, R = _qr(Xt)
    mid = Q.T @ (Q * (et**2)[:, None])
    r_inv = solve_triangular(R, np.eye(k))
    cov = r_inv @ mid @ r_inv.T
    cov = (cov + cov.T) / 2.0
    if flavor == "HC1":
        cov = cov * (n / (n - k))
    return SandwichCovariance(cov, flavor)


def classic_covariance(fit: RegressionFit, X) -> np.ndarray:
    """Model-based coefficient covariance ``sigma2_hat * (X'X)^{-1}``.

    Computed on the weight-transformed design for weighted fits, matching
    the scale on which ``sigma2_hat`` is defined.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != fit.n or X.shape[1] != fit.k:
        raise DimensionMismatch(
            f"design shape {X.shape} does not match fit with n={fit.n}, k={fit.k}"
        )
    Xt = X if fit.weights is None else X * np.sqrt(fit.weights)[:, None]
    _, R = _qr(Xt)
    r_inv = solve_triangular(R, np.eye(X.shape[1]))
    cov = fit.sigma2_hat * (r_inv @ r_inv.T)
    return (cov + cov.T) / 2.0


def hat_matrix(X) -> np.ndarray:
    """Full projection matrix ``X (X'X)^{-1} X'``.

    Only intended for small designs (theory oracles and tests); fits obtain
    leverages from the factorization instead.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch(f"design matrix must be 2-d, got shape {X.shape}")
    Q, _ = _qr(X)
    return Q @ Q.T
