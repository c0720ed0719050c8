"""Maximum-likelihood fitting of the general covariance structure.

The objective is F = log|Sigma| + tr(T Sigma^{-1}) over the free cells of a
CovarianceStructure.  Two routes to the optimum exist: a quasi-Newton
minimizer with an analytic gradient, and (for the static model) an implicit
alternating iteration built from closed-form updates; the test suite holds
them to the same answer.  Asymptotic parameter covariances come from a
sandwich of finite-difference Hessian blocks around empirical third/fourth
moments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from ._linalg import symmetrize
from .covariance import assemble_sigma
from .exceptions import (
    ComplexEigenvalue,
    NonConvergence,
    NonPDSigma,
    SingularHessian,
    StepFailure,
)
from .model import (
    CovarianceStructure,
    Dataset,
    EstimationResult,
    MimicParams,
    ModelSpec,
    ResolvedSpec,
    free_count,
    pack_params,
    unpack_params,
    validate_spec,
)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- objective

def discrepancy(sigma: np.ndarray, t_mat: np.ndarray) -> float:
    """log|Sigma| + tr(T Sigma^{-1}) through a Cholesky factor."""
    sigma = np.asarray(sigma, dtype=float)
    t_mat = np.asarray(t_mat, dtype=float)
    try:
        factor = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NonPDSigma(
            f"implied covariance ({sigma.shape[0]}x{sigma.shape[0]}) is not "
            "positive definite")
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return logdet + float(np.trace(cho_solve(factor, t_mat)))


def _objective_pieces(s: CovarianceStructure, t_mat: np.ndarray):
    """F plus the matrices the gradient reuses."""
    sigma = assemble_sigma(s)
    try:
        factor = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NonPDSigma("implied covariance is not positive definite")
    n = sigma.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    sinv = cho_solve(factor, np.eye(n))
    f_val = logdet + float(np.sum(sinv * t_mat))
    g_mat = symmetrize(sinv - sinv @ t_mat @ sinv)
    return f_val, g_mat, sigma


def gradient(theta: np.ndarray, template: CovarianceStructure,
             t_mat: np.ndarray) -> np.ndarray:
    """Analytic gradient of the discrepancy in packing order.

    With G = Sigma^{-1} - Sigma^{-1} T Sigma^{-1} and C = Lam Phi Lam' + Psi^2:
    dF/dB = 2 G B C, dF/dLam = 2 B'GB Lam Phi, dF/dPhi_ij = (2 - d_ij) of
    Lam'B'GB Lam, dF/dpsi_i = 2 psi_i (B'GB)_ii, dF/dtheta_i = 2 theta_i G_ii.
    """
    s = unpack_params(theta, template)
    _, g_mat, _ = _objective_pieces(s, t_mat)
    return _gradient_from_pieces(s, g_mat)


def _gradient_from_pieces(s: CovarianceStructure,
                          g_mat: np.ndarray) -> np.ndarray:
    c_mat = s.Lambda @ s.Phi @ s.Lambda.T + s.Psi @ s.Psi
    bgb = s.B.T @ g_mat @ s.B
    d_b = 2.0 * g_mat @ s.B @ c_mat
    d_lam = 2.0 * bgb @ s.Lambda @ s.Phi
    m_phi = s.Lambda.T @ bgb @ s.Lambda
    d_phi = 2.0 * m_phi - np.diag(np.diag(m_phi))
    d_psi = 2.0 * np.diag(s.Psi) * np.diag(bgb)
    d_theta = 2.0 * np.diag(s.Theta) * np.diag(g_mat)
    return np.concatenate([
        d_b[s.free["B"]],
        d_lam[s.free["Lambda"]],
        d_phi[np.tril(s.free["Phi"])],
        d_psi[np.diag(s.free["Psi"])],
        d_theta[np.diag(s.free["Theta"])],
    ])


# ------------------------------------------------------------------- minimizer

def _check_sample_matrix(t_mat: np.ndarray):
    t_mat = np.asarray(t_mat, dtype=float)
    if not np.allclose(t_mat, t_mat.T, atol=1e-10):
        raise NonPDSigma("sample matrix is not symmetric")
    eigs = np.linalg.eigvalsh(symmetrize(t_mat))
    if eigs[0] < -1e-10 * max(1.0, eigs[-1]):
        raise NonPDSigma(
            f"sample matrix has negative eigenvalue {eigs[0]:.3e}")


def minimize(template: CovarianceStructure, t_mat: np.ndarray, *,
             n_obs: int = 0, max_iter: int = 500, grad_tol: float = 1e-6,
             f_tol: float = 1e-10, start: np.ndarray | None = None
             ) -> EstimationResult:
    """Quasi-Newton minimization of the discrepancy over the free cells.

    Convergence requires both a gradient infinity-norm below grad_tol and a
    relative objective change below f_tol.  Hitting the iteration cap returns
    converged=False rather than raising; a line search that cannot find any
    positive-definite trial point raises StepFailure.
    """
    t_mat = symmetrize(np.asarray(t_mat, dtype=float))
    _check_sample_matrix(t_mat)
    x = pack_params(template) if start is None else np.array(start, dtype=float)

    # work on F minus its value at the saturated optimum; the shift is
    # constant so gradients are untouched, but near the minimum the line
    # search can still see improvements that |F| ~ 20 would round away
    sign, logdet_t = np.linalg.slogdet(t_mat)
    offset = logdet_t + t_mat.shape[0] if sign > 0 else 0.0

    def evaluate(vec):
        s = unpack_params(vec, template)
        f_val, g_mat, sigma = _objective_pieces(s, t_mat)
        return f_val - offset, _gradient_from_pieces(s, g_mat), sigma

    if x.size == 0:
        s = unpack_params(x, template)
        f_val, _, sigma = _objective_pieces(s, t_mat)
        return EstimationResult(structure=s, theta=x, param_names=(),
                                implied_sigma=sigma, sample_cov=t_mat,
                                objective_value=f_val, converged=True,
                                iterations=0, n_obs=n_obs)

    f_val, g_vec, _ = evaluate(x)
    h_inv = np.eye(x.size)
    curvature_fresh = True
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        direction = -h_inv @ g_vec
        if direction @ g_vec >= 0.0:
            # curvature estimate went bad; restart from steepest descent
            h_inv = np.eye(x.size)
            curvature_fresh = True
            direction = -g_vec
        step = 1.0
        slope = float(g_vec @ direction)
        accepted = None
        saw_pd = False
        while step > 1e-14:
            trial = x + step * direction
            try:
                f_new, g_new, _ = evaluate(trial)
            except NonPDSigma:
                step *= 0.5
                continue
            saw_pd = True
            if f_new <= f_val + 1e-4 * step * slope or f_new < f_val:
                accepted = (trial, f_new, g_new, step)
                break
            step *= 0.5
        if accepted is None:
            if not saw_pd:
                raise StepFailure(
                    "no positive-definite point found along the search "
                    "direction")
            if not curvature_fresh:
                # stale curvature may have produced a hopeless direction;
                # retry this point with plain steepest descent before bailing
                h_inv = np.eye(x.size)
                curvature_fresh = True
                continue
            # objective at its numerical floor; judge convergence where we are
            converged = (np.max(np.abs(g_vec)) < grad_tol)
            break
        x_new, f_new, g_new, step = accepted
        s_vec = x_new - x
        y_vec = g_new - g_vec
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            rho = 1.0 / sy
            outer = np.outer(s_vec, y_vec) * rho
            h_inv = ((np.eye(x.size) - outer) @ h_inv
                     @ (np.eye(x.size) - outer.T)
                     + rho * np.outer(s_vec, s_vec))
            curvature_fresh = False
        rel_change = abs(f_new - f_val) / max(1.0, abs(f_val))
        x, f_val, g_vec = x_new, f_new, g_new
        if np.max(np.abs(g_vec)) < grad_tol and rel_change < f_tol:
            converged = True
            break
    if not converged:
        log.warning("minimize stopped without convergence after %d iterations"
                    " (grad inf-norm %.2e)", iterations, np.max(np.abs(g_vec)))

    s = unpack_params(x, template)
    sigma = assemble_sigma(s)
    return EstimationResult(structure=s, theta=x, param_names=(),
                            implied_sigma=sigma, sample_cov=t_mat,
                            objective_value=f_val + offset, converged=converged,
                            iterations=iterations, n_obs=n_obs)


# ---------------------------------------------------------- implicit iteration

def _largest_real_eigenpair(m_mat, omega):
    """Top eigenpair of M Omega^{-1} through a symmetric transform.

    With Omega = L L', the eigenvalues of M Omega^{-1} equal those of
    L^{-1} M L^{-T}, which is symmetric, so they are real whenever Omega is
    positive definite.  The general solver is kept as a fallback and raises on
    a materially complex eigenvalue.
    """
    try:
        low = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eig(m_mat @ np.linalg.inv(omega))
        order = np.argsort(vals.real)[::-1]
        top = vals[order[0]]
        if abs(top.imag) > 1e-8 * max(1.0, abs(top.real)):
            raise ComplexEigenvalue(
                f"leading eigenvalue has imaginary part {top.imag:.3e}")
        return float(top.real), vecs[:, order[0]].real
    inner = solve_triangular(low, m_mat, lower=True)
    inner = solve_triangular(low, inner.T, lower=True).T
    vals, vecs = np.linalg.eigh(symmetrize(inner))
    if vals.size > 1 and vals[-1] - vals[-2] < 1e-8 * max(1.0, abs(vals[-1])):
        log.warning("leading eigenvalue nearly multiple: %.6g vs %.6g",
                    vals[-1], vals[-2])
    u = low @ vecs[:, -1]
    return float(vals[-1]), u


def implicit_ml_iteration(data: Dataset, spec, *, max_sweeps: int = 200,
                          tol: float = 1e-8, trace: list | None = None
                          ) -> MimicParams:
    """Alternating closed-form updates for the static model.

    Builds the cross-regression matrix P, the explained and residual indicator
    moments Q and S, then alternates: solve the eigenproblem
    [S + Q / kappa2] Omega^{-1} b = (1 + rho2) b for the loading direction,
    set the loading scale and error variances consistently with that
    direction, update the causal coefficients from P, and repeat to a fixed
    point.  The cause covariance is the sample one, its own ML estimate here.

    The scale step uses b' D S D b = pi2 (1 + pi2), D = diag(1/theta2), which
    follows from the eigen-equation contracted with b'D and removes an
    unstable scale-for-variance trade the raw substitution suffers from.
    Residual oscillation is damped, and a secant extrapolation is applied
    when the change ratio settles, each accepted only if the next sweep's
    change shrinks.
    """
    rspec = spec if isinstance(spec, ResolvedSpec) else validate_spec(spec, data)
    mspec = rspec.spec
    X = data.columns(mspec.causes)
    Y = data.columns(mspec.indicators)
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    n = X.shape[0]
    p = Y.shape[1]
    scaling = rspec.scaling_index

    s_xx = symmetrize(X.T @ X / n)
    s_yy = symmetrize(Y.T @ Y / n)
    p_mat = np.linalg.solve(X.T @ X, X.T @ Y)          # q x p
    fitted = X @ p_mat
    q_mat = symmetrize(fitted.T @ fitted / n)
    resid = Y - fitted
    s_mat = symmetrize(resid.T @ resid / n)
    s_diag = np.diag(s_yy)
    floor = 1e-8 * s_diag

    def scalar_pass(u_dir, t2, count):
        # loading scale, causal coefficients, rho2, and error variances for a
        # fixed direction; alpha = P D b / pi2 equals P Omega^{-1} b / kappa2
        b = u_dir
        alpha = None
        pi2 = rho2 = 0.0
        for _ in range(count):
            d_vec = 1.0 / t2
            du = d_vec * u_dir
            udu = float(u_dir @ du)
            c2 = max((float(du @ s_mat @ du) - udu) / udu ** 2, 1e-12)
            b = np.sqrt(c2) * u_dir
            db = d_vec * b
            pi2 = float(b @ db)
            alpha = (p_mat @ db) / pi2
            rho2 = float(alpha @ s_xx @ alpha)
            t2 = np.maximum(s_diag - (1.0 + rho2) * b ** 2, floor)
        return b, t2, alpha, pi2, rho2

    def sweep(b, t2):
        d_vec = 1.0 / t2
        pi2 = float(b ** 2 @ d_vec)
        kappa2 = pi2 / (1.0 + pi2)
        omega = symmetrize(np.outer(b, b) + np.diag(t2))
        _, u = _largest_real_eigenpair(s_mat + q_mat / kappa2, omega)
        if u[scaling] < 0:
            u = -u
        return scalar_pass(u / np.linalg.norm(u), t2, 2)

    # start: leading explained direction, error split at half the residual
    # variances, then a few consistency passes
    _, q_vecs = np.linalg.eigh(q_mat)
    u0 = q_vecs[:, -1]
    if u0[scaling] < 0:
        u0 = -u0
    beta, theta2, alpha, pi2, rho2 = scalar_pass(u0, 0.5 * np.diag(s_mat), 6)

    prev_delta = None
    prev_ratio = None
    gamma = 1.0
    oscillating = 0
    sweeps = 0
    change = np.inf
    while sweeps < max_sweeps:
        beta_new, theta2_new, alpha, pi2, rho2 = sweep(beta, theta2)
        sweeps += 1
        if gamma < 1.0:
            beta_new = beta + gamma * (beta_new - beta)
            theta2_new = np.maximum(theta2 + gamma * (theta2_new - theta2),
                                    floor)
        delta = np.concatenate([beta_new - beta, theta2_new - theta2])
        change = float(np.max(np.abs(delta)))
        beta, theta2 = beta_new, theta2_new
        if trace is not None:
            pi2_now = float(beta ** 2 @ (1.0 / theta2))
            trace.append({"sweep": sweeps, "rho2": rho2, "pi2": pi2_now,
                          "kappa2": pi2_now / (1.0 + pi2_now),
                          "change": change})
        if change < tol:
            break
        if prev_delta is None:
            prev_delta = delta
            prev_ratio = None
            continue
        den = float(prev_delta @ prev_delta)
        ratio = float(delta @ prev_delta) / den if den > 0 else 0.0
        if gamma == 1.0 and ratio < -0.5:
            oscillating += 1
            if oscillating >= 2:
                gamma = 0.5          # period-two cycle: halve the step for good
        elif ratio >= -0.5:
            oscillating = 0
        if (prev_ratio is not None and 0.2 < ratio < 0.995
                and abs(ratio - prev_ratio) < 0.02 * (1.0 + ratio)
                and sweeps < max_sweeps - 1):
            jump = np.concatenate([beta, theta2]) + delta * (ratio
                                                             / (1.0 - ratio))
            b_c = jump[:p]
            t2_c = np.maximum(jump[p:], floor)
            if b_c[scaling] > 0:
                b_n, t2_n, a_n, pi2_n, rho2_n = sweep(b_c, t2_c)
                sweeps += 1
                if gamma < 1.0:
                    b_n = b_c + gamma * (b_n - b_c)
                    t2_n = np.maximum(t2_c + gamma * (t2_n - t2_c), floor)
                change_c = max(float(np.max(np.abs(b_n - b_c))),
                               float(np.max(np.abs(t2_n - t2_c))))
                if trace is not None:
                    pi2_now = float(b_n ** 2 @ (1.0 / t2_n))
                    trace.append({"sweep": sweeps, "rho2": rho2_n,
                                  "pi2": pi2_now,
                                  "kappa2": pi2_now / (1.0 + pi2_now),
                                  "change": change_c})
                if change_c < change:
                    beta, theta2, alpha = b_n, t2_n, a_n
                    change = change_c
                    prev_delta = None
                    prev_ratio = None
                    if change < tol:
                        break
                    continue
        prev_ratio = ratio
        prev_delta = delta
    if change >= tol:
        raise NonConvergence(
            f"implicit iteration did not settle in {max_sweeps} sweeps "
            f"(last change {change:.3e})")

    return MimicParams(alpha=alpha, beta=beta, theta_diag=np.sqrt(theta2),
                       phi=s_xx)


# ----------------------------------------------------------- sandwich variance

@dataclass(frozen=True)
class MomentBlocks:
    """Ingredients of the sandwich: moment matrix and Hessian blocks.

    Gamma0 is partitioned over (mean part, distinct-covariance part): second
    moments, third central moments, and fourth central moments minus the outer
    product of the covariance vector.  H_eta_theta differentiates the gradient
    in the data moments; its mean rows vanish for centered data.
    """

    Gamma0: np.ndarray
    H_eta_theta: np.ndarray
    H_theta_theta: np.ndarray


def _vecs_indices(p):
    return [(i, j) for i in range(p) for j in range(i + 1)]


def moment_blocks(theta_hat: np.ndarray, obs: np.ndarray,
                  template: CovarianceStructure) -> MomentBlocks:
    """Empirical moment matrix and finite-difference Hessian blocks."""
    z = np.asarray(obs, dtype=float)
    z = z - z.mean(axis=0)
    n, p = z.shape
    pairs = _vecs_indices(p)
    v = len(pairs)
    t_mat = symmetrize(z.T @ z / n)

    # vecs of per-observation outer products, N x v
    vecs_obs = np.empty((n, v))
    for col, (i, j) in enumerate(pairs):
        vecs_obs[:, col] = z[:, i] * z[:, j]
    sigma_vec = vecs_obs.mean(axis=0)

    gamma = np.zeros((p + v, p + v))
    gamma[:p, :p] = t_mat
    third = z.T @ vecs_obs / n
    gamma[:p, p:] = third
    gamma[p:, :p] = third.T
    gamma[p:, p:] = symmetrize(vecs_obs.T @ vecs_obs / n
                               - np.outer(sigma_vec, sigma_vec))

    # dF/ds_ij = (2 - d_ij) (Sigma^{-1})_ij; differentiate in theta by
    # central differences of the inverse implied covariance
    k = theta_hat.size
    h_eta = np.zeros((p + v, k))
    for l in range(k):
        h = 1e-4 * (1.0 + abs(theta_hat[l]))
        up = theta_hat.copy()
        dn = theta_hat.copy()
        up[l] += h
        dn[l] -= h
        sinv_up = np.linalg.inv(assemble_sigma(unpack_params(up, template)))
        sinv_dn = np.linalg.inv(assemble_sigma(unpack_params(dn, template)))
        dsinv = (sinv_up - sinv_dn) / (2.0 * h)
        for col, (i, j) in enumerate(pairs):
            h_eta[p + col, l] = (2.0 - (i == j)) * dsinv[i, j]

    # curvature at the optimum, with the data moments replaced by the implied
    # ones so the population Hessian is differentiated
    t0 = assemble_sigma(unpack_params(theta_hat, template))
    h_tt = np.zeros((k, k))
    for l in range(k):
        h = 1e-4 * (1.0 + abs(theta_hat[l]))
        up = theta_hat.copy()
        dn = theta_hat.copy()
        up[l] += h
        dn[l] -= h
        h_tt[:, l] = (gradient(up, template, t0)
                      - gradient(dn, template, t0)) / (2.0 * h)
    return MomentBlocks(Gamma0=symmetrize(gamma), H_eta_theta=h_eta,
                        H_theta_theta=symmetrize(h_tt))


def sandwich_covariance(theta_hat: np.ndarray, obs,
                        template: CovarianceStructure) -> np.ndarray:
    """Asymptotic parameter covariance H^{-1} H' Gamma0 H H^{-1}.

    obs is the observed-variable matrix in the template's variable order (a
    Dataset is accepted and unwrapped).  Standard errors follow as
    sqrt(diag) / sqrt(N); see sandwich_std_errors.
    """
    if isinstance(obs, Dataset):
        obs = obs.values
    blocks = moment_blocks(np.asarray(theta_hat, dtype=float),
                           np.asarray(obs, dtype=float), template)
    try:
        h_inv_ht = np.linalg.solve(blocks.H_theta_theta,
                                   blocks.H_eta_theta.T)
    except np.linalg.LinAlgError:
        raise SingularHessian("curvature matrix is singular")
    cond = np.linalg.cond(blocks.H_theta_theta)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularHessian(
            f"curvature matrix is numerically singular (cond {cond:.3e})")
    return symmetrize(h_inv_ht @ blocks.Gamma0 @ h_inv_ht.T)


def sandwich_std_errors(pi_mat: np.ndarray, n_obs: int) -> np.ndarray:
    diag = np.clip(np.diag(pi_mat), 0.0, None)
    return np.sqrt(diag) / np.sqrt(n_obs)
