"""Model-implied covariance matrices for every estimator variant.

Each specialized assembler builds its block matrix directly; each mapping
lowers the same parameters to the general CovarianceStructure so that
assemble_sigma reproduces the specialized result.  Both paths are kept and
cross-checked in the test suite rather than collapsed into one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import symmetrize
from .exceptions import DimensionMismatch, NonPDBlock, NonPDPhi, SpecError
from .model import CovarianceStructure, MimicParams


def assemble_sigma(s: CovarianceStructure) -> np.ndarray:
    """General assembly B (Lambda Phi Lambda' + Psi^2) B' + Theta^2."""
    inner = s.Lambda @ s.Phi @ s.Lambda.T + s.Psi @ s.Psi
    return symmetrize(s.B @ inner @ s.B.T + s.Theta @ s.Theta)


# ----------------------------------------------------------------- static form

def _static_blocks(alpha, beta, theta_diag, phi, sigma2):
    q = alpha.shape[0]
    p = beta.shape[0]
    try:
        np.linalg.cholesky(phi)
    except np.linalg.LinAlgError:
        raise NonPDPhi(f"cause covariance ({q}x{q}) is not positive definite")
    rho2 = float(alpha @ phi @ alpha)
    out = np.zeros((q + p, q + p))
    out[:q, :q] = phi
    out[:q, q:] = np.outer(phi @ alpha, beta)
    out[q:, q:] = ((sigma2 + rho2) * np.outer(beta, beta)
                   + np.diag(theta_diag ** 2))
    return symmetrize(out)


def mimic_sigma(params: MimicParams) -> np.ndarray:
    """Block matrix over (causes, indicators):

        [ Phi            Phi a b'            ]
        [ b a' Phi       (s2 + r2) b b' + T2 ]

    with r2 = a' Phi a.  Symmetric by construction; PD for positive Theta.
    """
    return _static_blocks(params.alpha, params.beta, params.theta_diag,
                          params.phi, params.sigma2)


def tsls_mimic_sigma(params: MimicParams, phi_star: np.ndarray) -> np.ndarray:
    """Same block shape with the instrumented cause covariance in place of Phi.

    phi_star must already be on covariance scale (cross-product / N).
    """
    phi_star = np.asarray(phi_star, dtype=float)
    if phi_star.shape != (params.q, params.q):
        raise DimensionMismatch(
            f"phi_star shape {phi_star.shape}, expected ({params.q}, {params.q})")
    return _static_blocks(params.alpha, params.beta, params.theta_diag,
                          symmetrize(phi_star), params.sigma2)


def _static_structure(alpha, beta, theta_diag, phi, sigma2, scaling_index,
                      fix_scaling):
    q = alpha.shape[0]
    p = beta.shape[0]
    B = np.zeros((q + p, q + 1))
    B[:q, :q] = np.eye(q)
    B[q:, q] = beta
    Lam = np.vstack([np.eye(q), alpha])
    Psi = np.zeros((q + 1, q + 1))
    Psi[q, q] = np.sqrt(sigma2)
    Theta = np.zeros((q + p, q + p))
    Theta[q:, q:] = np.diag(theta_diag)

    b_mask = np.zeros((q + p, q + 1), bool)
    b_mask[q:, q] = True
    if fix_scaling:
        b_mask[q + scaling_index, q] = False
    lam_mask = np.zeros((q + 1, q), bool)
    lam_mask[q, :] = True
    th_mask = np.zeros((q + p, q + p), bool)
    th_mask[q + np.arange(p), q + np.arange(p)] = True
    free = {"B": b_mask, "Lambda": lam_mask,
            "Phi": np.ones((q, q), bool), "Theta": th_mask}
    return CovarianceStructure(B=B, Lambda=Lam, Phi=phi, Psi=Psi, Theta=Theta,
                               free=free)


def map_mimic(params: MimicParams, scaling_index: int = 0,
              fix_scaling: bool = True) -> CovarianceStructure:
    """Lower static parameters to the general structure.

    B stacks [I_q, 0; 0, beta]; Lambda stacks [I_q; alpha']; Phi is the cause
    covariance (free, symmetric); Psi carries the latent disturbance SD in its
    corner (fixed); Theta holds the indicator error SDs.  fix_scaling pins the
    scaling indicator's loading at its current value (the identification
    convention); the relaxed form exists for optimizer cross-checks under the
    variance-only normalization.
    """
    return _static_structure(params.alpha, params.beta, params.theta_diag,
                             params.phi, params.sigma2, scaling_index,
                             fix_scaling)


def map_tsls_mimic(params: MimicParams, phi_star: np.ndarray,
                   scaling_index: int = 0,
                   fix_scaling: bool = True) -> CovarianceStructure:
    """As map_mimic with the instrumented cause covariance substituted."""
    phi_star = symmetrize(np.asarray(phi_star, dtype=float))
    if phi_star.shape != (params.q, params.q):
        raise DimensionMismatch(
            f"phi_star shape {phi_star.shape}, expected ({params.q}, {params.q})")
    return _static_structure(params.alpha, params.beta, params.theta_diag,
                             phi_star, params.sigma2, scaling_index,
                             fix_scaling)


# ---------------------------------------------------------------- reduced form

@dataclass(frozen=True)
class ReducedForm:
    """Pi = beta alpha' (p x q), Omega = sigma2 beta beta' + Theta^2."""

    Pi: np.ndarray
    Omega: np.ndarray


def reduced_form(params: MimicParams) -> ReducedForm:
    pi = np.outer(params.beta, params.alpha)
    omega = (params.sigma2 * np.outer(params.beta, params.beta)
             + np.diag(params.theta_diag ** 2))
    return ReducedForm(Pi=pi, Omega=symmetrize(omega))


# ------------------------------------------------------------ dynamic variants

def _as_vec(x, name):
    if x is None:
        return None
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector")
    return v


def _as_mat(x, shape, name):
    if x is None:
        return None
    m = np.asarray(x, dtype=float)
    m = np.atleast_2d(m) if m.size else m.reshape(shape)
    if m.shape != shape:
        raise DimensionMismatch(f"{name} shape {m.shape}, expected {shape}")
    return m


@dataclass(frozen=True)
class EmimicParams:
    """Parameters of the dynamic model over integrated and stationary causes.

    Level form (over x: integrated causes, v: stationary causes, y: indicators):
    gamma_star, tau are the structural coefficients, phi1_star/n_mat/phi2 the
    cause covariance blocks.  Error-correction form (over dx, v, z_lag, dy):
    alpha_delta, beta_delta, kappa_star are short-run coefficients, phi3_star/
    m_star/phi2/omega_star the covariance blocks.  lam carries the indicator
    loadings, psi the latent disturbance variance, theta_diag the indicator
    error SDs.  Only the fields a given assembler needs must be present.
    """

    lam: np.ndarray
    theta_diag: np.ndarray
    psi: float = 1.0
    gamma_star: np.ndarray | None = None
    tau: np.ndarray | None = None
    phi1_star: np.ndarray | None = None
    n_mat: np.ndarray | None = None
    phi2: np.ndarray | None = None
    alpha_delta: np.ndarray | None = None
    beta_delta: np.ndarray | None = None
    kappa_star: np.ndarray | None = None
    phi3_star: np.ndarray | None = None
    m_star: np.ndarray | None = None
    omega_star: np.ndarray | None = None

    def __post_init__(self):
        lam = _as_vec(self.lam, "lam")
        theta = _as_vec(self.theta_diag, "theta_diag")
        p = lam.shape[0]
        if theta.shape != (p,):
            raise DimensionMismatch(
                f"theta_diag shape {theta.shape} does not match p={p}")
        if np.any(theta <= 0):
            raise SpecError("theta_diag entries must be positive")
        if self.psi <= 0:
            raise SpecError("psi must be positive")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "theta_diag", theta)
        for name in ("gamma_star", "tau", "alpha_delta", "beta_delta",
                     "kappa_star"):
            object.__setattr__(self, name, _as_vec(getattr(self, name), name))
        a = self.n_i1
        b = self.n_i0
        shapes = {"phi1_star": (a, a), "n_mat": (a, b), "phi2": (b, b),
                  "phi3_star": (a, a), "m_star": (b, a), "omega_star": (p, p)}
        for name, shape in shapes.items():
            val = getattr(self, name)
            if val is None:
                continue
            if None in shape:
                raise DimensionMismatch(
                    f"{name} given but its dimension is undetermined")
            mat = _as_mat(val, shape, name)
            if (name not in ("n_mat", "m_star")
                    and not np.allclose(mat, mat.T, atol=1e-8)):
                raise SpecError(f"{name} must be symmetric")
            object.__setattr__(self, name, mat)
        if self.kappa_star is not None and self.kappa_star.shape != (p,):
            raise DimensionMismatch(
                f"kappa_star shape {self.kappa_star.shape} does not match p={p}")

    @property
    def p(self) -> int:
        return self.lam.shape[0]

    @property
    def n_i1(self):
        for v in (self.gamma_star, self.alpha_delta):
            if v is not None:
                return v.shape[0]
        for m in (self.phi1_star, self.phi3_star):
            if m is not None:
                return np.asarray(m).shape[0]
        return None

    @property
    def n_i0(self):
        for v in (self.tau, self.beta_delta):
            if v is not None:
                return v.shape[0]
        if self.phi2 is not None:
            return np.asarray(self.phi2).shape[0]
        return None


def _require(params, *names):
    missing = [n for n in names if getattr(params, n) is None]
    if missing:
        raise DimensionMismatch(
            f"missing blocks for this assembly: {', '.join(missing)}")


def _check_pd_block(mat, name):
    if mat.shape[0] == 0:
        return
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NonPDBlock(f"covariance block {name} is not positive definite")


def emimic_sigma_static(params: EmimicParams) -> np.ndarray:
    """Level-form block matrix over (x, v, y).

    Var(y) carries the latent disturbance term psi lam lam' alongside the
    quadratic form in the structural coefficients; with no stationary causes
    the matrix collapses to the static shape with phi1_star in place of Phi.
    """
    _require(params, "gamma_star", "tau", "phi1_star", "n_mat", "phi2")
    g, t, lam = params.gamma_star, params.tau, params.lam
    p1, n, p2 = params.phi1_star, params.n_mat, params.phi2
    _check_pd_block(p1, "phi1_star")
    _check_pd_block(p2, "phi2")
    a, b, p = g.shape[0], t.shape[0], params.p

    q = a + b
    out = np.zeros((q + p, q + p))
    out[:a, :a] = p1
    out[:a, a:q] = n
    out[a:q, a:q] = p2
    out[:a, q:] = np.outer(p1 @ g + n @ t, lam)
    out[a:q, q:] = np.outer(n.T @ g + p2 @ t, lam)
    quad = float(g @ p1 @ g + 2.0 * (g @ n @ t) + t @ p2 @ t)
    out[q:, q:] = ((quad + params.psi) * np.outer(lam, lam)
                   + np.diag(params.theta_diag ** 2))
    return symmetrize(out)


def emimic_sigma_ecm(params: EmimicParams) -> np.ndarray:
    """Error-correction block matrix over (dx, v, z_lag, dy).

    z_lag is uncorrelated with the differenced and stationary causes; its
    cross block with dy is Omega* kappa* lam'.
    """
    _require(params, "alpha_delta", "beta_delta", "kappa_star", "phi3_star",
             "m_star", "phi2", "omega_star")
    ad, bd, ks, lam = (params.alpha_delta, params.beta_delta,
                       params.kappa_star, params.lam)
    p3, m, p2, om = params.phi3_star, params.m_star, params.phi2, params.omega_star
    _check_pd_block(p3, "phi3_star")
    _check_pd_block(p2, "phi2")
    _check_pd_block(om, "omega_star")
    a, b, p = ad.shape[0], bd.shape[0], params.p

    n_tot = a + b + 2 * p
    out = np.zeros((n_tot, n_tot))
    i_v = a
    i_z = a + b
    i_dy = a + b + p
    out[:a, :a] = p3
    out[:a, i_v:i_z] = m.T
    out[i_v:i_z, i_v:i_z] = p2
    out[i_z:i_dy, i_z:i_dy] = om
    out[:a, i_dy:] = np.outer(p3 @ ad + m.T @ bd, lam)
    out[i_v:i_z, i_dy:] = np.outer(m @ ad + p2 @ bd, lam)
    out[i_z:i_dy, i_dy:] = np.outer(om @ ks, lam)
    quad = float(ad @ p3 @ ad + 2.0 * (ad @ m.T @ bd) + bd @ p2 @ bd
                 + ks @ om @ ks)
    out[i_dy:, i_dy:] = ((quad + params.psi) * np.outer(lam, lam)
                         + np.diag(params.theta_diag ** 2))
    return symmetrize(out)


def _dynamic_structure(coefs, phi_full, phi_mask, lam, psi, theta_diag,
                       scaling_index, fix_scaling):
    """Shared lowering for both dynamic forms: k factors plus one latent."""
    k = phi_full.shape[0]
    p = lam.shape[0]
    B = np.zeros((k + p, k + 1))
    B[:k, :k] = np.eye(k)
    B[k:, k] = lam
    Lam = np.vstack([np.eye(k), coefs])
    Psi = np.zeros((k + 1, k + 1))
    Psi[k, k] = np.sqrt(psi)
    Theta = np.zeros((k + p, k + p))
    Theta[k:, k:] = np.diag(theta_diag)

    b_mask = np.zeros((k + p, k + 1), bool)
    b_mask[k:, k] = True
    if fix_scaling:
        b_mask[k + scaling_index, k] = False
    lam_mask = np.zeros((k + 1, k), bool)
    lam_mask[k, :] = True
    th_mask = np.zeros((k + p, k + p), bool)
    th_mask[k + np.arange(p), k + np.arange(p)] = True
    free = {"B": b_mask, "Lambda": lam_mask, "Phi": phi_mask, "Theta": th_mask}
    return CovarianceStructure(B=B, Lambda=Lam, Phi=phi_full, Psi=Psi,
                               Theta=Theta, free=free)


def map_emimic_static(params: EmimicParams, scaling_index: int = 0,
                      fix_scaling: bool = True) -> CovarianceStructure:
    """Lower the level form: factors are (x, v), coefficients (gamma*, tau)."""
    _require(params, "gamma_star", "tau", "phi1_star", "n_mat", "phi2")
    a = params.gamma_star.shape[0]
    b = params.tau.shape[0]
    phi_full = np.block([[params.phi1_star, params.n_mat],
                         [params.n_mat.T, params.phi2]])
    coefs = np.concatenate([params.gamma_star, params.tau])
    phi_mask = np.ones((a + b, a + b), bool)
    return _dynamic_structure(coefs, symmetrize(phi_full), phi_mask,
                              params.lam, params.psi, params.theta_diag,
                              scaling_index, fix_scaling)


def map_emimic_ecm(params: EmimicParams, scaling_index: int = 0,
                   fix_scaling: bool = True) -> CovarianceStructure:
    """Lower the error-correction form: factors are (dx, v, z_lag).

    The factor covariance is block sparse: z_lag is uncorrelated with the
    other factors, and the corresponding mask cells stay fixed at zero.
    """
    _require(params, "alpha_delta", "beta_delta", "kappa_star", "phi3_star",
             "m_star", "phi2", "omega_star")
    a = params.alpha_delta.shape[0]
    b = params.beta_delta.shape[0]
    p = params.p
    k = a + b + p
    phi_full = np.zeros((k, k))
    phi_full[:a, :a] = params.phi3_star
    phi_full[:a, a:a + b] = params.m_star.T
    phi_full[a:a + b, :a] = params.m_star
    phi_full[a:a + b, a:a + b] = params.phi2
    phi_full[a + b:, a + b:] = params.omega_star
    coefs = np.concatenate([params.alpha_delta, params.beta_delta,
                            params.kappa_star])
    phi_mask = np.zeros((k, k), bool)
    phi_mask[:a + b, :a + b] = True
    phi_mask[a + b:, a + b:] = True
    return _dynamic_structure(coefs, symmetrize(phi_full), phi_mask,
                              params.lam, params.psi, params.theta_diag,
                              scaling_index, fix_scaling)
