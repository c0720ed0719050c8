"""Instrumental-variable machinery.

Single-equation two-stage least squares, projection matrices, instrument pool
selection, and the first-stage quantities (instrumented cause covariance,
instrumented cause coefficients, indicator loadings by within-block IV) that
the two-stage estimators compose with the likelihood fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._linalg import lstsq_qr, project_onto, qr_basis, solve_pd, symmetrize
from .exceptions import NonPDOmega, Underidentified
from .model import Dataset, ResolvedSpec

log = logging.getLogger(__name__)


def projection_matrix(X: np.ndarray) -> np.ndarray:
    """Materialize the orthogonal projector onto the column span of X.

    Intended for testing and small N; the fitting paths project through a QR
    factor instead of forming the N x N matrix.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = qr_basis(X, "projection basis")
    return symmetrize(q @ q.T)


@dataclass(frozen=True)
class TslsFit:
    """Result of a single-equation two-stage least squares fit.

    A_hat regresses y on the projected regressors; residuals are computed
    against the original regressors, so they are instrument-orthogonal only in
    the exactly identified case.
    """

    A_hat: np.ndarray
    Z_hat: np.ndarray
    first_stage_coefs: np.ndarray
    residuals: np.ndarray
    instrument_count: int
    regressor_count: int


def two_stage_least_squares(y: np.ndarray, Z: np.ndarray,
                            V: np.ndarray) -> TslsFit:
    """Project Z onto the instrument span, then regress y on the projection.

    V must contain at least as many columns as Z (order condition) and is
    expected to carry an intercept column when the equation has one.
    """
    y = np.asarray(y, dtype=float).ravel()
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    r = Z.shape[1]
    s = V.shape[1]
    if s < r:
        raise Underidentified(
            f"{r} regressors but only {s} instrument columns")
    q_v = qr_basis(V, "instrument matrix")
    z_hat = project_onto(q_v, Z)
    first_stage = lstsq_qr(V, Z, "first-stage design")
    a_hat = lstsq_qr(z_hat, y, "projected regressors")
    residuals = y - Z @ a_hat
    return TslsFit(A_hat=a_hat, Z_hat=z_hat, first_stage_coefs=first_stage,
                   residuals=residuals, instrument_count=s, regressor_count=r)


def select_instruments(rspec: ResolvedSpec, equation_index=None):
    """Deterministic instrument pool for one equation.

    equation_index None (or the scaling indicator's position) addresses the
    structural equation, whose observed form regresses the scaling indicator
    on every cause; an integer j addresses indicator j's measurement equation,
    which regresses indicator j on the scaling indicator.  Pool order:
    declared instruments, then exogenous causes, then indicators excluded from
    the equation, each in declaration order.
    """
    spec = rspec.spec
    scaling = rspec.scaling_index
    if equation_index is None or equation_index == scaling:
        lhs = {spec.indicators[scaling]}
        rhs_count = spec.q
        excluded_ind = [n for i, n in enumerate(spec.indicators)
                        if i != scaling]
    else:
        if not 0 <= equation_index < spec.p:
            raise IndexError(
                f"equation_index {equation_index} out of range for "
                f"{spec.p} indicators")
        rhs_count = 1
        excluded_ind = [n for i, n in enumerate(spec.indicators)
                        if i not in (equation_index, scaling)]
    pool = list(spec.instruments) + list(rspec.exogenous_causes) + excluded_ind
    if len(pool) < rhs_count:
        raise Underidentified(
            f"instrument pool has {len(pool)} columns for {rhs_count} "
            "regressors")
    return tuple(pool)


def phi_star(X: np.ndarray, instruments: np.ndarray | None = None) -> np.ndarray:
    """Cross-product of the causes after projection onto the instrument span.

    Returns the raw X' P X (not divided by N).  Without instruments the
    projection is the identity on col(X) and the result is plain X'X.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    qr_basis(X, "cause matrix")  # rank check only
    if instruments is None:
        return symmetrize(X.T @ X)
    W = np.atleast_2d(np.asarray(instruments, dtype=float))
    q_w = qr_basis(W, "instrument matrix")
    x_hat = project_onto(q_w, X)
    # idempotency: X' P X = (P X)'(P X), symmetric PSD by construction
    return symmetrize(x_hat.T @ x_hat)


def alpha_star(p_mat: np.ndarray, omega: np.ndarray, beta: np.ndarray,
               kappa2: float) -> np.ndarray:
    """Cause coefficients from the cross-regression matrix: P Omega^{-1} b / k2."""
    p_mat = np.atleast_2d(np.asarray(p_mat, dtype=float))
    beta = np.asarray(beta, dtype=float).ravel()
    try:
        ob = solve_pd(np.asarray(omega, dtype=float), beta)
    except np.linalg.LinAlgError:
        raise NonPDOmega("indicator covariance is not positive definite")
    return (p_mat @ ob) / kappa2


def iv_loadings(data: Dataset, rspec: ResolvedSpec):
    """Loadings by within-block instrumental variables, plus a latent variance.

    Each non-scaling indicator is regressed on the scaling indicator by 2SLS,
    instrumenting with the remaining indicators; this sidesteps the errors-in-
    variables bias of a plain OLS of indicator on indicator.  The latent
    variance is recovered from the scaling indicator's covariances divided by
    the matching loading, averaged across indicators.
    """
    spec = rspec.spec
    p = spec.p
    if p < 3:
        raise Underidentified(
            "loading estimation needs at least 3 indicators for "
            "within-block instruments")
    Y = data.columns(spec.indicators)
    Y = Y - Y.mean(axis=0)
    n = Y.shape[0]
    s_idx = rspec.scaling_index
    ones = np.ones((n, 1))
    loadings = np.ones(p)
    for j in range(p):
        if j == s_idx:
            continue
        others = [k for k in range(p) if k not in (j, s_idx)]
        Z = np.column_stack([ones, Y[:, [s_idx]]])
        V = np.column_stack([ones, Y[:, others]])
        fit = two_stage_least_squares(Y[:, j], Z, V)
        loadings[j] = fit.A_hat[1]
    cov = (Y.T @ Y) / n
    ratios = [cov[s_idx, j] / loadings[j] for j in range(p) if j != s_idx]
    latent_var = float(np.mean(ratios))
    return loadings, latent_var
