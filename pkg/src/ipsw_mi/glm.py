"""Logistic regression by IRLS, weighted least squares, HC0 sandwich variance
and approximate-posterior coefficient draws.

Design matrices passed in here never contain an intercept column; one is
prepended internally and reported first in ``GlmFit.coef``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

MAX_ITER = 50
SCORE_TOL = 1e-8
DEVIANCE_TOL = 1e-10
SEPARATION_COEF = 30.0
RIDGE = 1e-8
RANK_TOL = 1e-12


class GlmError(RuntimeError):
    pass


class SeparationError(GlmError):
    """Logistic MLE does not exist (complete or quasi-complete separation)."""


class RankDeficientError(GlmError):
    pass


class ClippedCovarianceWarning(RuntimeWarning):
    """Covariance had negative eigenvalues that were clipped to zero."""


@dataclass(frozen=True)
class GlmFit:
    family: str
    coef: np.ndarray
    cov_model: np.ndarray
    cov_robust: np.ndarray | None
    iterations: int
    converged: bool
    names: tuple[str, ...] | None = None
    weights_used: np.ndarray | None = None
    ridged: bool = False
    # unscaled (X'WX)^-1 and residual scale, kept for posterior draws
    xtwx_inv: np.ndarray = field(default=None, repr=False)
    sigma2: float = 1.0
    df_resid: int = 0
    design: np.ndarray | None = field(default=None, repr=False)
    resid: np.ndarray | None = field(default=None, repr=False)

    @property
    def se_model(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_model))

    @property
    def se_robust(self) -> np.ndarray:
        if self.cov_robust is None:
            raise GlmError("fit was computed without robust covariance")
        return np.sqrt(np.diag(self.cov_robust))


def add_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


def _check_rank(xtwx: np.ndarray) -> None:
    # scale-free check on the correlation form of X'WX
    d = np.sqrt(np.clip(np.diag(xtwx), 0.0, None))
    if np.any(d == 0.0):
        raise RankDeficientError("design has an all-zero column on the supported rows")
    ev = np.linalg.eigvalsh(xtwx / np.outer(d, d))
    if ev[0] <= RANK_TOL * ev[-1]:
        raise RankDeficientError("design matrix is rank deficient on the supported rows")


def _inv_spd(a: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of a symmetric positive definite matrix, with a tiny ridge if
    Cholesky fails."""
    try:
        c = np.linalg.cholesky(a)
        ridged = False
    except np.linalg.LinAlgError:
        a = a + RIDGE * np.eye(a.shape[0]) * max(1.0, float(np.max(np.abs(np.diag(a)))))
        c = np.linalg.cholesky(a)
        ridged = True
    ci = np.linalg.inv(c)
    return ci.T @ ci, ridged


def _hc0(X: np.ndarray, w: np.ndarray, resid: np.ndarray, bread: np.ndarray) -> np.ndarray:
    u = X * (w * resid)[:, None]
    meat = u.T @ u
    cov = bread @ meat @ bread
    return (cov + cov.T) / 2.0


def _deviance(y: np.ndarray, eta: np.ndarray, w: np.ndarray) -> float:
    return float(-2.0 * np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logistic_loglik(coef: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> float:
    """Weighted log-likelihood; ``X`` includes the intercept column."""
    w = np.ones(len(y)) if w is None else w
    eta = X @ coef
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logistic_score(coef: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    w = np.ones(len(y)) if w is None else w
    return X.T @ (w * (y - expit(X @ coef)))


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None = None,
    names: Sequence[str] | None = None,
    robust: bool = True,
    intercept: bool = True,
) -> GlmFit:
    """Maximum likelihood logistic regression by iteratively reweighted least squares.

    Parameters
    ----------
    X : (n, p) array
        Predictors without intercept.
    y : (n,) array of 0/1
    w : (n,) array, optional
        Non-negative case weights.
    robust : bool
        Also compute the HC0 sandwich covariance.
    intercept : bool
        Prepend an intercept column; ``False`` means ``X`` is the full design.

    Raises
    ------
    SeparationError
        If the outcome is single-class or coefficients diverge.
    RankDeficientError
        If the design is not of full column rank.
    """
    Xd = add_intercept(X) if intercept else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xd.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise GlmError("logistic outcome must be 0/1")
    sw = w > 0
    if y[sw].min() == y[sw].max():
        raise SeparationError("outcome has a single class")
    _check_rank(Xd[sw].T @ (Xd[sw] * w[sw, None]))

    coef = np.zeros(p)
    ybar = np.average(y, weights=w)
    coef[0] = np.log(ybar / (1.0 - ybar))
    eta = Xd @ coef
    mu = expit(eta)
    dev = _deviance(y, eta, w)
    score = Xd.T @ (w * (y - mu))
    converged = False
    ridged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        v = w * mu * (1.0 - mu)
        info = Xd.T @ (Xd * v[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            ridged = True
            step = np.linalg.solve(info + RIDGE * np.eye(p), score)
        coef = coef + step
        eta = Xd @ coef
        mu = expit(eta)
        new_dev = _deviance(y, eta, w)
        score = Xd.T @ (w * (y - mu))
        rel = abs(new_dev - dev) / (abs(new_dev) + 0.1)
        dev = new_dev
        if np.max(np.abs(coef)) > SEPARATION_COEF:
            raise SeparationError(
                f"logistic coefficients diverging (max |coef| = {np.max(np.abs(coef)):.1f}); "
                "outcome is (quasi-)separated by the predictors"
            )
        if np.max(np.abs(score)) < SCORE_TOL or rel < DEVIANCE_TOL:
            converged = True
            break

    v = w * mu * (1.0 - mu)
    info = Xd.T @ (Xd * v[:, None])
    cov, r2 = _inv_spd(info)
    ridged = ridged or r2
    resid = y - mu
    cov_r = _hc0(Xd, w, resid, cov) if robust else None
    return GlmFit(
        family="logistic",
        coef=coef,
        cov_model=cov,
        cov_robust=cov_r,
        iterations=it,
        converged=converged,
        names=tuple(names) if names is not None else None,
        weights_used=w,
        ridged=ridged,
        xtwx_inv=cov,
        sigma2=1.0,
        df_resid=int(np.count_nonzero(sw)) - p,
        design=Xd,
        resid=resid,
    )


def predict_proba(fit: GlmFit, X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    if fit.family != "logistic":
        raise GlmError("predict_proba needs a logistic fit")
    if names is not None and fit.names is not None and tuple(names) != fit.names:
        raise GlmError(f"predictor names {tuple(names)} do not match fitted {fit.names}")
    Xd = add_intercept(X)
    if Xd.shape[1] != fit.coef.size:
        raise GlmError(f"expected {fit.coef.size - 1} predictors, got {Xd.shape[1] - 1}")
    return expit(Xd @ fit.coef)


def fit_wls(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None = None,
    names: Sequence[str] | None = None,
    robust: bool = True,
    intercept: bool = True,
) -> GlmFit:
    """Weighted least squares, ``argmin sum w_i (y_i - x_i b)^2``.

    ``cov_model`` is the classical ``s^2 (X'WX)^-1`` with
    ``s^2 = sum w r^2 / (n_+ - p)`` where ``n_+`` counts positive weights.
    With ``intercept=False`` the caller's ``X`` is used as the full design.
    """
    Xd = add_intercept(X) if intercept else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xd.shape
    if w is None:
        xtwx = Xd.T @ Xd
        xtwy = Xd.T @ y
        n_pos = n
    else:
        w = np.asarray(w, dtype=float)
        if np.any(w < 0) or not np.isfinite(w).all():
            raise GlmError("weights must be finite and non-negative")
        if w.sum() <= 0:
            raise GlmError("weights sum to zero")
        n_pos = int(np.count_nonzero(w > 0))
        xtwx = Xd.T @ (Xd * w[:, None])
        xtwy = Xd.T @ (w * y)
    _check_rank(xtwx)
    xtwx_inv, ridged = _inv_spd(xtwx)
    coef = xtwx_inv @ xtwy
    resid = y - Xd @ coef
    df = n_pos - p
    rss = float(resid @ resid) if w is None else float(np.sum(w * resid**2))
    if robust and w is None:
        w = np.ones(n)
    sigma2 = rss / df if df > 0 else 0.0
    cov_r = _hc0(Xd, w, resid, xtwx_inv) if robust else None
    return GlmFit(
        family="linear",
        coef=coef,
        cov_model=sigma2 * xtwx_inv,
        cov_robust=cov_r,
        iterations=1,
        converged=True,
        names=tuple(names) if names is not None else None,
        weights_used=w,
        ridged=ridged,
        xtwx_inv=xtwx_inv,
        sigma2=sigma2,
        df_resid=df,
        design=Xd,
        resid=resid,
    )


def sandwich_cov(fit: GlmFit) -> np.ndarray:
    """HC0 sandwich ``B^-1 M B^-1`` with the case weights held fixed.

    ``M = sum_i w_i^2 r_i^2 x_i x_i'`` where ``r`` is the response residual;
    ``B`` is ``X'WX`` (linear) or the Fisher information (logistic).
    """
    if fit.design is None or fit.resid is None:
        raise GlmError("fit does not carry its design and residuals")
    w = fit.weights_used if fit.weights_used is not None else np.ones(fit.resid.size)
    bread = fit.xtwx_inv
    return _hc0(fit.design, w, fit.resid, bread)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor ``L`` with ``L L' = cov`` after clipping negative
    eigenvalues."""
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    if vals.min() < -1e-10 * scale:
        warnings.warn(
            f"covariance not PSD (min eigenvalue {vals.min():.3g}); clipped to zero",
            ClippedCovarianceWarning,
            stacklevel=3,
        )
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def draw_coef(fit: GlmFit, rng: np.random.Generator) -> np.ndarray:
    """One draw from the approximate posterior of the coefficients.

    Logistic: ``N(coef, cov_model)``.  Linear: ``sigma*^2 = RSS / chi2(df)``
    first, then ``N(coef, sigma*^2 (X'WX)^-1)``.
    """
    if fit.family == "linear":
        if fit.sigma2 <= 0.0 or fit.df_resid <= 0:
            return fit.coef.copy()
        rss = fit.sigma2 * fit.df_resid
        sigma2_star = rss / rng.chisquare(fit.df_resid)
        cov = sigma2_star * fit.xtwx_inv
    else:
        cov = fit.cov_model
    if not np.any(cov):
        return fit.coef.copy()
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = _psd_factor(cov)
    return fit.coef + L @ rng.standard_normal(fit.coef.size)
