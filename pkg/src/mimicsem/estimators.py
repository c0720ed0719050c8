"""Estimator dispatch: each variant lowered to one template, then minimized.

The five estimators differ only in how the observation matrix and the
covariance template are prepared; the ML step and the sandwich are shared.
"""

from __future__ import annotations

import numpy as np

from ._linalg import project_onto, qr_basis
from .covariance import EmimicParams, map_emimic_ecm, map_mimic, map_tsls_mimic
from .dynamics import build_ecm_design, classify_integration, dmimic_transform
from .mlfit import minimize, sandwich_covariance, sandwich_std_errors
from .model import (
    ESTIMATORS,
    CovarianceStructure,
    Dataset,
    EstimationResult,
    MimicParams,
    ModelSpec,
    ResolvedSpec,
    validate_spec,
)
from .twosls import alpha_star, iv_loadings

ESTIMATOR_NAMES = ESTIMATORS


def _pooled(obs: np.ndarray):
    centered = obs - obs.mean(axis=0)
    t_mat = centered.T @ centered / obs.shape[0]
    return centered, t_mat


def _with_free_psi(structure: CovarianceStructure,
                   pin_phi: bool = False) -> CovarianceStructure:
    """Free the latent disturbance SD (the Psi corner).

    pin_phi additionally fixes every factor covariance cell at its start
    value.  The instrumented dynamic fit needs this: the fitted z columns are
    proportional in the limit (each is the same projected disequilibrium times
    a loading), so leaving their covariance block free puts a singular
    direction into the parameter space and the gradient can never reach
    tolerance in double precision.
    """
    free = {name: np.array(structure.free[name]) for name in structure.free}
    m = structure.Psi.shape[0]
    free["Psi"][m - 1, m - 1] = True
    if pin_phi:
        free["Phi"][:] = False
    return CovarianceStructure(B=structure.B, Lambda=structure.Lambda,
                               Phi=structure.Phi, Psi=structure.Psi,
                               Theta=structure.Theta, free=free)


def _names_for(template: CovarianceStructure, factors, observed):
    """Parameter names aligned with the pack order of the free cells."""
    names = []
    for i, _ in zip(*np.nonzero(template.free["B"])):
        names.append(f"beta[{observed[i]}]")
    for _, j in zip(*np.nonzero(template.free["Lambda"])):
        names.append(f"alpha[{factors[j]}]")
    for i, j in zip(*np.nonzero(np.tril(template.free["Phi"]))):
        names.append(f"phi[{factors[i]},{factors[j]}]")
    if np.any(template.free["Psi"]):
        names.append("psi")
    for i in np.nonzero(np.diag(template.free["Theta"]))[0]:
        names.append(f"theta[{observed[i]}]")
    return tuple(names)


def _loading_ratios(coef: np.ndarray, scaling_index: int):
    """Loading starts from a reduced-form coefficient matrix (k, p)."""
    base = coef[:, scaling_index].copy()
    if float(base @ base) < 1e-10:
        base = np.full(coef.shape[0], 0.1)
    lam = (coef.T @ base) / float(base @ base)
    lam[scaling_index] = 1.0
    return base, lam


def _static_starts(xc: np.ndarray, yc: np.ndarray,
                   scaling_index: int) -> MimicParams:
    coef, *_ = np.linalg.lstsq(xc, yc, rcond=None)
    alpha0, lam0 = _loading_ratios(coef, scaling_index)
    theta0 = np.sqrt(np.maximum(yc.var(axis=0) / 2.0, 1e-4))
    phi0 = xc.T @ xc / xc.shape[0]
    return MimicParams(alpha=alpha0, beta=lam0, theta_diag=theta0, phi=phi0)


def _extract_static(full: CovarianceStructure, q: int) -> MimicParams:
    return MimicParams(alpha=full.Lambda[q, :q].copy(),
                       beta=full.B[q:, q].copy(),
                       theta_diag=np.maximum(
                           np.abs(np.diag(full.Theta)[q:]), 1e-12),
                       phi=full.Phi.copy(),
                       sigma2=max(float(full.Psi[q, q]) ** 2, 1e-12))


def _attach(result: EstimationResult, template, obs, params, names, estimator,
            rspec, want_se):
    result.params = params
    result.param_names = names
    result.estimator = estimator
    result.resolved = rspec
    if want_se and result.converged:
        pi_mat = sandwich_covariance(result.theta, obs, template)
        result.std_errors = sandwich_std_errors(pi_mat, result.n_obs)
        result.se_method = "sandwich"
    elif estimator == "TSLS_EMIMIC":
        # no analytic formula for this composition; the harness bootstraps
        result.se_method = "bootstrap"
    return result


def _fit_static(dataset: Dataset, spec: ModelSpec, rspec: ResolvedSpec,
                estimator: str, want_se: bool) -> EstimationResult:
    labels = spec.causes + spec.indicators
    obs = dataset.columns(labels)
    centered, t_mat = _pooled(obs)
    q = spec.q
    starts = _static_starts(centered[:, :q], centered[:, q:],
                            rspec.scaling_index)
    template = map_mimic(starts, rspec.scaling_index)
    result = minimize(template, t_mat, n_obs=obs.shape[0])
    result.var_names = labels
    return _attach(result, template, obs, _extract_static(result.structure, q),
                   _names_for(template, spec.causes, labels), estimator, rspec,
                   want_se)


def _fit_tsls_static(data: Dataset, spec: ModelSpec, rspec: ResolvedSpec,
                     want_se: bool) -> EstimationResult:
    x = data.columns(spec.causes)
    y = data.columns(spec.indicators)
    n = x.shape[0]
    w_mat = np.column_stack(
        [np.ones(n)]
        + [data.column(c) for c in rspec.exogenous_causes]
        + [data.column(w) for w in spec.instruments])
    basis = qr_basis(w_mat, "instrument matrix")
    x_hat = project_onto(basis, x)
    obs = np.hstack([x_hat, y])
    centered, t_mat = _pooled(obs)
    q, p = spec.q, spec.p

    # the projected-cause covariance block of t_mat is Phi*
    phi0 = t_mat[:q, :q]
    if p >= 3:
        lam0, latent_var = iv_loadings(data, rspec)
        latent_var = max(latent_var, 0.1)
        yvar = centered[:, q:].var(axis=0)
        theta2 = np.maximum(yvar - latent_var * lam0 ** 2, 0.1 * yvar)
        theta0 = np.sqrt(theta2)
        pi2 = float(np.sum(lam0 ** 2 / theta2))
        coef, *_ = np.linalg.lstsq(centered[:, :q], centered[:, q:],
                                   rcond=None)
        omega0 = latent_var * np.outer(lam0, lam0) + np.diag(theta2)
        alpha0 = alpha_star(coef, omega0, lam0, pi2 / (1.0 + pi2))
        starts = MimicParams(alpha=alpha0, beta=lam0, theta_diag=theta0,
                             phi=phi0)
    else:
        starts = _static_starts(centered[:, :q], centered[:, q:],
                                rspec.scaling_index)
    # the latent disturbance absorbs first-stage residual variance
    # alpha'(Phi - Phi*)alpha, so its scale has to be estimated here
    template = _with_free_psi(map_tsls_mimic(starts, phi0,
                                             rspec.scaling_index))
    result = minimize(template, t_mat, n_obs=n)
    labels = spec.causes + spec.indicators
    result.var_names = labels
    return _attach(result, template, obs, _extract_static(result.structure, q),
                   _names_for(template, spec.causes, labels), "TSLS_MIMIC",
                   rspec, want_se)


def _ecm_starts(centered: np.ndarray, t_mat: np.ndarray, a: int, b: int,
                p: int, scaling_index: int) -> EmimicParams:
    k = a + b + p
    design = centered[:, :k]
    dy = centered[:, k:]
    coef, *_ = np.linalg.lstsq(design, dy, rcond=None)
    base, lam0 = _loading_ratios(coef, scaling_index)
    resid = dy[:, scaling_index] - design @ base
    psi0 = max(float(resid @ resid) / resid.size / 2.0, 1e-3)
    theta0 = np.sqrt(np.maximum(dy.var(axis=0) / 2.0, 1e-4))
    return EmimicParams(lam=lam0, theta_diag=theta0, psi=psi0,
                        alpha_delta=base[:a], beta_delta=base[a:a + b],
                        kappa_star=base[a + b:],
                        phi3_star=t_mat[:a, :a],
                        m_star=t_mat[a:a + b, :a],
                        phi2=t_mat[a:a + b, a:a + b],
                        omega_star=t_mat[a + b:k, a + b:k])


def _extract_emimic(full: CovarianceStructure, a: int, b: int,
                    p: int) -> EmimicParams:
    k = a + b + p
    coefs = full.Lambda[k, :k]
    return EmimicParams(
        lam=full.B[k:, k].copy(),
        theta_diag=np.maximum(np.abs(np.diag(full.Theta)[k:]), 1e-12),
        psi=max(float(full.Psi[k, k]) ** 2, 1e-12),
        alpha_delta=coefs[:a].copy(),
        beta_delta=coefs[a:a + b].copy(),
        kappa_star=coefs[a + b:].copy(),
        phi3_star=full.Phi[:a, :a].copy(),
        m_star=full.Phi[a:a + b, :a].copy(),
        phi2=full.Phi[a:a + b, a:a + b].copy(),
        omega_star=full.Phi[a + b:k, a + b:k].copy())


def _instrument_ecm(data: Dataset, spec: ModelSpec, i1_names, i0_names,
                    dx, v, z_lag, dy, unit_length):
    """Project the endogenous causes and the z block onto instrument spans.

    The endogenous causes are projected onto an intercept, the exogenous
    design columns and the declared instrument columns.  Each z column is
    projected onto that span plus its own once-more-lagged value: the own
    lag is a valid instrument because the measurement noise entering both
    z and dy is serially uncorrelated, and keeping the lags separate per
    indicator stops the fitted z block from collapsing onto one common
    factor, which would leave a singular direction in the moment metric.
    Costs one design row per unit.
    """
    total = dy.shape[0]
    rows = total if unit_length is None else unit_length - 1
    n_units = total // rows
    keep = np.ones(total, bool)
    keep[::rows] = False
    lag = np.ones(total, bool)
    lag[rows - 1::rows] = False
    z_instr = z_lag[lag]
    dx_c, v_c, z_c, dy_c = dx[keep], v[keep], z_lag[keep], dy[keep]

    w = data.columns(spec.instruments)
    if unit_length is None:
        w_c = w[2:, :]
    else:
        w_c = np.vstack([w[u * unit_length:(u + 1) * unit_length][2:, :]
                         for u in range(n_units)])

    endo = set(spec.endogenous_causes)
    endo_dx = [i for i, name in enumerate(i1_names) if name in endo]
    exog_dx = [i for i in range(dx.shape[1]) if i not in endo_dx]
    endo_v = [i for i, name in enumerate(i0_names) if name in endo]
    exog_v = [i for i in range(v.shape[1]) if i not in endo_v]

    exog_span = np.column_stack(
        [np.ones(dy_c.shape[0]), dx_c[:, exog_dx], v_c[:, exog_v], w_c])
    basis = qr_basis(exog_span, "instrument matrix")
    dx_hat = np.array(dx_c)
    if endo_dx:
        dx_hat[:, endo_dx] = project_onto(basis, dx_c[:, endo_dx])
    v_hat = np.array(v_c)
    if endo_v:
        v_hat[:, endo_v] = project_onto(basis, v_c[:, endo_v])
    z_hat = np.empty_like(z_c)
    for j in range(z_c.shape[1]):
        own = qr_basis(np.column_stack([exog_span, z_instr[:, j]]),
                       "instrument matrix")
        z_hat[:, j] = project_onto(own, z_c[:, j:j + 1])[:, 0]
    return dx_hat, v_hat, z_hat, dy_c


def _fit_ecm(data: Dataset, spec: ModelSpec, rspec: ResolvedSpec,
             unit_length, instrumented: bool, want_se: bool
             ) -> EstimationResult:
    classification = classify_integration(data, spec, unit_length=unit_length)
    dy, dx, v, z_lag = build_ecm_design(data, spec, classification,
                                        unit_length=unit_length)
    i1_names, i0_names = classification.split(spec.causes)
    estimator = "TSLS_EMIMIC" if instrumented else "EMIMIC"
    if instrumented:
        dx, v, z_lag, dy = _instrument_ecm(data, spec, i1_names, i0_names,
                                           dx, v, z_lag, dy, unit_length)
    obs = np.hstack([dx, v, z_lag, dy])
    centered, t_mat = _pooled(obs)
    a, b, p = dx.shape[1], v.shape[1], spec.p

    starts = _ecm_starts(centered, t_mat, a, b, p, rspec.scaling_index)
    template = _with_free_psi(map_emimic_ecm(starts, rspec.scaling_index),
                              pin_phi=instrumented)
    result = minimize(template, t_mat, n_obs=obs.shape[0])
    factors = (tuple(f"d({n})" for n in i1_names) + tuple(i0_names)
               + tuple(f"z({n})" for n in spec.indicators))
    observed = factors + tuple(f"d({n})" for n in spec.indicators)
    result.var_names = observed
    return _attach(result, template, obs,
                   _extract_emimic(result.structure, a, b, p),
                   _names_for(template, factors, observed), estimator, rspec,
                   want_se and not instrumented)


def fit_model(data: Dataset, spec: ModelSpec, *, unit_length=None,
              compute_se: bool = True) -> EstimationResult:
    """Fit the estimator named in the spec and return an enriched result.

    unit_length marks panel boundaries for the dynamic estimators (rows per
    unit); None treats the data as a single series.  Standard errors are
    sandwich-based where an analytic form exists; the instrumented dynamic
    estimator reports none here and is bootstrapped by the caller.
    """
    rspec = validate_spec(spec, data)
    if spec.estimator == "MIMIC":
        return _fit_static(data, spec, rspec, "MIMIC", compute_se)
    if spec.estimator == "DMIMIC":
        diffed = dmimic_transform(data, spec, unit_length=unit_length)
        return _fit_static(diffed, spec, rspec, "DMIMIC", compute_se)
    if spec.estimator == "TSLS_MIMIC":
        return _fit_tsls_static(data, spec, rspec, compute_se)
    instrumented = spec.estimator == "TSLS_EMIMIC"
    return _fit_ecm(data, spec, rspec, unit_length, instrumented, compute_se)
