"""Fit indices, latent-score prediction, and composite-index construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionMismatch,
    NonPDOmega,
    NonPDSigma,
    RankDeficient,
    SingleGroup,
    SpecError,
    ZeroDf,
)
from .mlfit import discrepancy
from .model import Dataset, EstimationResult, MimicParams


@dataclass(frozen=True)
class FitReport:
    """Chi-square and the three summary indices for one converged fit.

    rmsea and srmr are nonnegative, cfi lies in [0, 1], and df is positive;
    the constructor functions below guarantee this.
    """

    chi2: float
    df: int
    chi2_baseline: float
    df_baseline: int
    rmsea: float
    srmr: float
    cfi: float
    n_obs: int


def _chi2(f_min: float, t_mat: np.ndarray, n_obs: int) -> float:
    p = t_mat.shape[0]
    sign, logdet_t = np.linalg.slogdet(t_mat)
    if sign <= 0:
        raise NonPDSigma("sample covariance is not positive definite")
    return max(0.0, (n_obs - 1) * (f_min - logdet_t - p))


def fit_indices(result: EstimationResult, n_obs: int | None = None) -> FitReport:
    """Summarize fit quality of an estimated covariance structure.

    chi2 is the likelihood-ratio statistic of the fitted model against the
    saturated one; the baseline for CFI frees only the observed variances
    (diagonal implied covariance).  RMSEA and CFI use the excess of chi2 over
    its degrees of freedom; SRMR averages squared correlation-scale residuals
    over the lower triangle.
    """
    n = result.n_obs if n_obs is None else int(n_obs)
    t_mat = np.asarray(result.sample_cov, dtype=float)
    sigma = np.asarray(result.implied_sigma, dtype=float)
    p = t_mat.shape[0]
    df = p * (p + 1) // 2 - result.theta.size
    if df <= 0:
        raise ZeroDf(f"{result.theta.size} free parameters leave df={df}")

    chi2 = _chi2(discrepancy(sigma, t_mat), t_mat, n)

    # baseline: diagonal Sigma, minimized exactly at the sample variances
    f_base = float(np.sum(np.log(np.diag(t_mat)))) + p
    chi2_b = _chi2(f_base, t_mat, n)
    df_b = p * (p + 1) // 2 - p

    rmsea = float(np.sqrt(max(0.0, chi2 - df) / (df * (n - 1))))

    scale = np.sqrt(np.outer(np.diag(t_mat), np.diag(t_mat)))
    rows, cols = np.tril_indices(p)
    rel = ((t_mat - sigma) / scale)[rows, cols]
    srmr = float(np.sqrt(np.mean(rel ** 2)))

    excess = max(chi2 - df, 0.0)
    denom = max(chi2_b - df_b, chi2 - df, 0.0)
    cfi = 1.0 if denom == 0.0 else 1.0 - excess / denom
    cfi = min(1.0, max(0.0, cfi))

    return FitReport(chi2=chi2, df=df, chi2_baseline=chi2_b, df_baseline=df_b,
                     rmsea=rmsea, srmr=srmr, cfi=cfi, n_obs=n)


def _static_params(result: EstimationResult) -> MimicParams:
    if not isinstance(result.params, MimicParams):
        raise SpecError("latent scores need a static fit carrying MimicParams")
    return result.params


def predict_scores(result: EstimationResult, data: Dataset) -> np.ndarray:
    """Model-implied conditional mean of the latent variable per observation.

    score_n = alpha'x_n + sigma2 * beta' Omega^{-1} (y_n - beta alpha'x_n)
    with Omega the implied indicator covariance given the causes.
    """
    params = _static_params(result)
    if result.resolved is not None:
        spec = result.resolved.spec
        x = np.column_stack([data.column(c) for c in spec.causes])
        y = np.column_stack([data.column(c) for c in spec.indicators])
    else:
        q = params.alpha.size
        x = data.values[:, :q]
        y = data.values[:, q:q + params.beta.size]
    if y.shape[1] != params.beta.size:
        raise DimensionMismatch(
            f"{y.shape[1]} indicator columns for {params.beta.size} loadings")

    omega = (params.sigma2 * np.outer(params.beta, params.beta)
             + np.diag(params.theta_diag ** 2))
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise NonPDOmega("implied indicator covariance is singular") from None
    weights = params.sigma2 * np.linalg.solve(
        chol.T, np.linalg.solve(chol, params.beta))

    signal = x @ params.alpha
    return signal + (y - np.outer(signal, params.beta)) @ weights


def build_index(scores, groups) -> dict:
    """Group means of the scores, min-max rescaled onto [0, 1]."""
    values = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(groups).ravel()
    if labels.size != values.size:
        raise DimensionMismatch(
            f"{labels.size} group labels for {values.size} scores")
    order = []
    for label in labels:
        if label not in order:
            order.append(label)
    if len(order) < 2:
        raise SingleGroup("index needs at least two distinct groups")
    means = {g: float(values[labels == g].mean()) for g in order}
    lo = min(means.values())
    span = max(means.values()) - lo
    if span == 0.0:
        # all group means tie: everything sits at the pinned minimum
        return {g: 0.0 for g in order}
    return {g: (m - lo) / span for g, m in means.items()}


def first_stage_proxy(data: Dataset, endogenous: str,
                      exogenous) -> tuple[np.ndarray, float]:
    """Fitted values of the endogenous column on the exogenous set.

    Returns (fitted column, R squared); the fitted column substitutes for the
    observed one before a static fit, making the analysis a two-stage
    regression in effect.
    """
    y = data.column(endogenous)
    names = tuple(exogenous)
    design = np.column_stack(
        [np.ones(y.size)] + [data.column(name) for name in names])
    if y.size <= design.shape[1]:
        raise RankDeficient(
            f"{y.size} rows cannot identify {design.shape[1]} coefficients")
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise RankDeficient("exogenous predictors are collinear")
    fitted = design @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - fitted) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return fitted, r_squared
