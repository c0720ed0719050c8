"""Shared linear-algebra helpers.

Every solve goes through a QR or Cholesky factorization; explicit inverses are
never formed.  Rank decisions use a relative tolerance of RANK_RTOL times the
largest factor diagonal.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .exceptions import RankDeficient

RANK_RTOL = 1e-10


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Exact symmetry: keep the upper triangle, mirror it down."""
    u = np.triu(a)
    return u + np.triu(a, 1).T


def chol_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; lets LinAlgError propagate to the caller."""
    return np.linalg.cholesky(a)


def logdet_pd(a: np.ndarray) -> float:
    l = chol_lower(a)
    return 2.0 * float(np.sum(np.log(np.diag(l))))


def solve_pd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a."""
    c, low = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def qr_basis(x: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Orthonormal basis of col(x) with a rank check.

    Raises RankDeficient when any R diagonal falls below RANK_RTOL times the
    largest one, i.e. the columns are collinear beyond tolerance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    q, r = np.linalg.qr(x)
    d = np.abs(np.diag(r))
    if d.size == 0:
        raise RankDeficient(f"{what} has no columns")
    if np.min(d) <= RANK_RTOL * np.max(d):
        raise RankDeficient(
            f"{what} is rank deficient (min |R_ii| = {np.min(d):.3e}, "
            f"max = {np.max(d):.3e})")
    return q


def lstsq_qr(x: np.ndarray, y: np.ndarray, what: str = "design") -> np.ndarray:
    """Least-squares coefficients via QR with the package rank tolerance."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    q, r = np.linalg.qr(x)
    d = np.abs(np.diag(r))
    if d.size == 0 or np.min(d) <= RANK_RTOL * np.max(d):
        raise RankDeficient(f"{what} matrix is rank deficient")
    return scipy.linalg.solve_triangular(r, q.T @ y, lower=False,
                                         check_finite=False)


def project_onto(basis_q: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Apply the projection onto span(basis_q) without forming the hat matrix."""
    return basis_q @ (basis_q.T @ m)
