"""Core domain types shared by every estimator.

A Dataset is a column-named numeric matrix.  A ModelSpec declares which columns
are indicators, causes, and instruments, and which estimator to run.
validate_spec resolves labels against a dataset and runs the identification
checks, collecting every diagnostic before raising.  CovarianceStructure is the
general parameterization Sigma = B (Lambda Phi Lambda' + Psi^2) B' + Theta^2
that all estimator variants lower to, together with a bijective pack/unpack of
its free cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING

import numpy as np

from .exceptions import (
    DimensionMismatch,
    EndogenousWithoutIV,
    SpecError,
    Underidentified,
    UnknownColumn,
)

if TYPE_CHECKING:  # pragma: no cover
    from .evaluate import FitReport

ESTIMATORS = ("MIMIC", "DMIMIC", "EMIMIC", "TSLS_MIMIC", "TSLS_EMIMIC")
TSLS_ESTIMATORS = ("TSLS_MIMIC", "TSLS_EMIMIC")
ECM_ESTIMATORS = ("EMIMIC", "TSLS_EMIMIC")
INTEGRATION_TAGS = ("I0", "I1")


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


# --------------------------------------------------------------------- dataset

@dataclass(frozen=True)
class Dataset:
    """Numeric observation matrix with unique column labels.

    Rows are observations or time points; columns are variables.  Entries must
    be finite: ingestion (cli.load_csv) drops incomplete rows before
    construction, so a non-finite value here is a programming error upstream.
    """

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise DimensionMismatch(
                f"dataset values must be 2-D, got ndim={vals.ndim}")
        names = tuple(str(n) for n in self.names)
        if vals.shape[1] != len(names):
            raise DimensionMismatch(
                f"{vals.shape[1]} columns but {len(names)} names")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SpecError(f"duplicate column names: {dupes}")
        if vals.shape[0] < 2:
            raise SpecError("dataset needs at least 2 rows")
        if not np.all(np.isfinite(vals)):
            raise SpecError("dataset contains non-finite entries")
        object.__setattr__(self, "values", _readonly(vals))
        object.__setattr__(self, "names", names)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownColumn(f"column '{name}' not in dataset") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index_of(name)]

    def columns(self, names) -> np.ndarray:
        """Stack the named columns into an (N, len(names)) matrix."""
        if len(names) == 0:
            return np.empty((self.n_rows, 0))
        idx = [self.index_of(n) for n in names]
        return self.values[:, idx]


# ------------------------------------------------------------------ model spec

@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one model.

    indicators: observed reflections of the latent variable (p >= 2).
    causes: observed predictors of the latent variable (q >= 1).
    instruments: columns eligible as instruments for endogenous causes.
    endogenous_causes: causes suspected of correlating with the errors; these
        route the fit into the two-stage estimators.
    integration_order: optional per-cause pin in {"I0", "I1"}; overrides the
        unit-root classifier in the error-correction path.
    estimator: one of MIMIC, DMIMIC, EMIMIC, TSLS_MIMIC, TSLS_EMIMIC.
    scaling_indicator: indicator whose loading is fixed at 1 (default: first).
    """

    indicators: tuple[str, ...]
    causes: tuple[str, ...]
    instruments: tuple[str, ...] = ()
    endogenous_causes: tuple[str, ...] = ()
    integration_order: object = None
    estimator: str = "MIMIC"
    scaling_indicator: str | None = None

    def __post_init__(self):
        for name in ("indicators", "causes", "instruments", "endogenous_causes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        io = dict(self.integration_order) if self.integration_order else {}
        object.__setattr__(self, "integration_order", MappingProxyType(io))

    @property
    def p(self) -> int:
        return len(self.indicators)

    @property
    def q(self) -> int:
        return len(self.causes)

    @property
    def scaling(self) -> str:
        if self.scaling_indicator is not None:
            return self.scaling_indicator
        return self.indicators[0]


def static_free_count(p: int, q: int) -> int:
    # alpha (q) + loadings except scaling (p-1) + error SDs (p) + Phi (q(q+1)/2)
    return q + (p - 1) + p + q * (q + 1) // 2


@dataclass(frozen=True)
class ResolvedSpec:
    """A ModelSpec annotated with column indices after validation."""

    spec: ModelSpec
    indicator_idx: tuple[int, ...]
    cause_idx: tuple[int, ...]
    instrument_idx: tuple[int, ...]
    endogenous_idx: tuple[int, ...]   # positions within spec.causes
    scaling_index: int                # position within spec.indicators
    free_count: int

    @property
    def p(self) -> int:
        return len(self.indicator_idx)

    @property
    def q(self) -> int:
        return len(self.cause_idx)

    @property
    def exogenous_causes(self) -> tuple[str, ...]:
        endo = set(self.spec.endogenous_causes)
        return tuple(c for c in self.spec.causes if c not in endo)


def validate_spec(spec: ModelSpec, data: Dataset) -> ResolvedSpec:
    """Resolve labels and run identification checks.

    Diagnostics are collected exhaustively; if any exist, the first one is
    raised with the full list attached as ``.diagnostics`` so a config file's
    errors surface in one pass.
    """
    diags: list[SpecError] = []

    if spec.estimator not in ESTIMATORS:
        diags.append(SpecError(
            f"unknown estimator '{spec.estimator}', expected one of "
            f"{', '.join(ESTIMATORS)}"))
    if spec.p < 2:
        diags.append(SpecError(f"need at least 2 indicators, got {spec.p}"))
    if spec.q < 1:
        diags.append(SpecError("need at least 1 cause"))

    for role, labels in (("indicator", spec.indicators),
                         ("cause", spec.causes),
                         ("instrument", spec.instruments)):
        seen = set()
        for lab in labels:
            if lab in seen:
                diags.append(SpecError(f"duplicate {role} '{lab}'"))
            seen.add(lab)

    name_set = set(data.names)
    referenced = (list(spec.indicators) + list(spec.causes)
                  + list(spec.instruments) + list(spec.endogenous_causes)
                  + list(spec.integration_order.keys()))
    missing_seen = set()
    for lab in referenced:
        if lab not in name_set and lab not in missing_seen:
            diags.append(UnknownColumn(f"column '{lab}' not in dataset"))
            missing_seen.add(lab)

    endo = set(spec.endogenous_causes)
    shared = [c for c in spec.causes if c in set(spec.indicators)]
    for lab in shared:
        if lab not in endo:
            diags.append(SpecError(
                f"'{lab}' is both indicator and cause but not flagged "
                "endogenous"))
    for lab in spec.endogenous_causes:
        if lab not in set(spec.causes):
            diags.append(SpecError(
                f"endogenous label '{lab}' is not a declared cause"))
    overlap = set(spec.instruments) & set(spec.indicators)
    for lab in sorted(overlap):
        diags.append(SpecError(
            f"instrument '{lab}' may not also be an indicator"))

    if endo and spec.estimator not in TSLS_ESTIMATORS:
        diags.append(EndogenousWithoutIV(
            f"endogenous causes declared but estimator is {spec.estimator}; "
            "use TSLS_MIMIC or TSLS_EMIMIC"))
    if endo and len(spec.instruments) < len(endo):
        diags.append(Underidentified(
            f"{len(endo)} endogenous cause(s) but only "
            f"{len(spec.instruments)} instrument(s)"))

    scaling = spec.scaling
    if scaling not in spec.indicators:
        diags.append(SpecError(
            f"scaling indicator '{scaling}' is not an indicator"))

    for lab, order in spec.integration_order.items():
        if order not in INTEGRATION_TAGS:
            diags.append(SpecError(
                f"integration order for '{lab}' must be I0 or I1, got "
                f"'{order}'"))
        if lab not in set(spec.causes):
            diags.append(SpecError(
                f"integration order declared for non-cause '{lab}'"))

    p, q = spec.p, spec.q
    free = static_free_count(p, q)
    bound = (p + q) * (p + q + 1) // 2
    if free > bound:
        diags.append(Underidentified(
            f"free parameter count {free} exceeds distinct moment count "
            f"{bound}"))

    if diags:
        first = diags[0]
        first.diagnostics = diags
        raise first

    return ResolvedSpec(
        spec=spec,
        indicator_idx=tuple(data.index_of(n) for n in spec.indicators),
        cause_idx=tuple(data.index_of(n) for n in spec.causes),
        instrument_idx=tuple(data.index_of(n) for n in spec.instruments),
        endogenous_idx=tuple(spec.causes.index(n)
                             for n in spec.endogenous_causes),
        scaling_index=spec.indicators.index(scaling),
        free_count=free,
    )


# ------------------------------------------------------------------ parameters

@dataclass(frozen=True)
class MimicParams:
    """Static model parameters.

    alpha: cause coefficients (q,).  beta: indicator loadings (p,).
    theta_diag: positive indicator error SDs (p,).  phi: symmetric PD cause
    covariance (q, q).  sigma2: latent disturbance variance, fixed at 1 for
    identification.
    """

    alpha: np.ndarray
    beta: np.ndarray
    theta_diag: np.ndarray
    phi: np.ndarray
    sigma2: float = 1.0

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        theta = np.atleast_1d(np.asarray(self.theta_diag, dtype=float))
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        q, p = alpha.shape[0], beta.shape[0]
        if theta.shape != (p,):
            raise DimensionMismatch(
                f"theta_diag shape {theta.shape} does not match p={p}")
        if phi.shape != (q, q):
            raise DimensionMismatch(
                f"phi shape {phi.shape} does not match q={q}")
        if np.any(theta <= 0):
            raise SpecError("theta_diag entries must be positive")
        if not np.allclose(phi, phi.T, atol=1e-8):
            raise SpecError("phi must be symmetric")
        if self.sigma2 <= 0:
            raise SpecError("sigma2 must be positive")
        phi = (phi + phi.T) / 2.0
        object.__setattr__(self, "alpha", _readonly(alpha))
        object.__setattr__(self, "beta", _readonly(beta))
        object.__setattr__(self, "theta_diag", _readonly(theta))
        object.__setattr__(self, "phi", _readonly(phi))

    @property
    def q(self) -> int:
        return self.alpha.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def rho2(self) -> float:
        return float(self.alpha @ self.phi @ self.alpha)

    @property
    def pi2(self) -> float:
        return float(self.sigma2 * np.sum((self.beta / self.theta_diag) ** 2))

    @property
    def kappa2(self) -> float:
        # equals beta' Omega^{-1} beta; the ratio form is exact for rank-one
        # Omega - Theta^2
        return self.pi2 / (1.0 + self.pi2)


# --------------------------------------------------------- covariance structure

_MATRICES = ("B", "Lambda", "Phi", "Psi", "Theta")


@dataclass(frozen=True)
class CovarianceStructure:
    """General covariance parameterization with free/fixed cell masks.

    Sigma = B (Lambda Phi Lambda' + Psi^2) B' + Theta^2, with Phi symmetric and
    Psi, Theta diagonal.  ``free`` maps each matrix name to a boolean mask of
    estimable cells; for Phi the mask must be symmetric and only the lower
    triangle is packed.
    """

    B: np.ndarray
    Lambda: np.ndarray
    Phi: np.ndarray
    Psi: np.ndarray
    Theta: np.ndarray
    free: object = None

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.B, dtype=float))
        lam = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        theta = np.atleast_2d(np.asarray(self.Theta, dtype=float))
        n, m = b.shape
        k = phi.shape[0]
        if lam.shape != (m, k):
            raise DimensionMismatch(
                f"Lambda shape {lam.shape}, expected ({m}, {k})")
        if phi.shape != (k, k):
            raise DimensionMismatch(f"Phi must be square, got {phi.shape}")
        if psi.shape != (m, m):
            raise DimensionMismatch(f"Psi shape {psi.shape}, expected ({m}, {m})")
        if theta.shape != (n, n):
            raise DimensionMismatch(
                f"Theta shape {theta.shape}, expected ({n}, {n})")
        if not np.allclose(phi, phi.T, atol=1e-8):
            raise SpecError("Phi must be symmetric")
        for name, mat in (("Psi", psi), ("Theta", theta)):
            if np.any(mat - np.diag(np.diag(mat)) != 0.0):
                raise SpecError(f"{name} must be diagonal")

        masks = {} if self.free is None else dict(self.free)
        shapes = {"B": b.shape, "Lambda": lam.shape, "Phi": phi.shape,
                  "Psi": psi.shape, "Theta": theta.shape}
        clean = {}
        for name in _MATRICES:
            mask = np.asarray(masks.get(name, np.zeros(shapes[name], bool)),
                              dtype=bool)
            if mask.shape != shapes[name]:
                raise DimensionMismatch(
                    f"free mask for {name} has shape {mask.shape}, expected "
                    f"{shapes[name]}")
            clean[name] = mask
        if not np.array_equal(clean["Phi"], clean["Phi"].T):
            raise SpecError("free mask for Phi must be symmetric")
        for name in ("Psi", "Theta"):
            offdiag = clean[name] & ~np.eye(shapes[name][0], dtype=bool)
            if np.any(offdiag):
                raise SpecError(f"free mask for {name} must be diagonal-only")
        for name, mat in (("B", b), ("Lambda", lam), ("Phi", (phi + phi.T) / 2),
                          ("Psi", psi), ("Theta", theta)):
            object.__setattr__(self, name, _readonly(mat))
        for name in clean:
            clean[name] = clean[name].copy()
            clean[name].flags.writeable = False
        object.__setattr__(self, "free", MappingProxyType(clean))

    @property
    def n_observed(self) -> int:
        return self.B.shape[0]


def free_count(s: CovarianceStructure) -> int:
    total = 0
    for name in _MATRICES:
        mask = s.free[name]
        if name == "Phi":
            total += int(np.count_nonzero(np.tril(mask)))
        else:
            total += int(np.count_nonzero(mask))
    return total


def pack_params(s: CovarianceStructure) -> np.ndarray:
    """Flatten the free cells in a fixed documented order.

    Order: B row-major, Lambda row-major, Phi lower triangle row-major,
    Psi diagonal, Theta diagonal.
    """
    parts = [s.B[s.free["B"]], s.Lambda[s.free["Lambda"]],
             s.Phi[np.tril(s.free["Phi"])],
             np.diag(s.Psi)[np.diag(s.free["Psi"])],
             np.diag(s.Theta)[np.diag(s.free["Theta"])]]
    return np.concatenate(parts) if parts else np.empty(0)


def unpack_params(vector: np.ndarray,
                  template: CovarianceStructure) -> CovarianceStructure:
    """Inverse of pack_params against a template; fixed cells untouched."""
    vector = np.atleast_1d(np.asarray(vector, dtype=float))
    expected = free_count(template)
    if vector.shape != (expected,):
        raise DimensionMismatch(
            f"parameter vector has length {vector.shape[0]}, template has "
            f"{expected} free cells")
    pos = 0
    b = template.B.copy()
    nb = int(np.count_nonzero(template.free["B"]))
    b[template.free["B"]] = vector[pos:pos + nb]
    pos += nb

    lam = template.Lambda.copy()
    nl = int(np.count_nonzero(template.free["Lambda"]))
    lam[template.free["Lambda"]] = vector[pos:pos + nl]
    pos += nl

    phi = template.Phi.copy()
    low = np.tril(template.free["Phi"])
    np_phi = int(np.count_nonzero(low))
    phi[low] = vector[pos:pos + np_phi]
    # mirror the written lower triangle so Phi stays exactly symmetric
    strict = np.tril(low, -1)
    phi.T[strict] = phi[strict]
    pos += np_phi

    psi = template.Psi.copy()
    dmask = np.diag(template.free["Psi"])
    npsi = int(np.count_nonzero(dmask))
    d = np.diag(psi).copy()
    d[dmask] = vector[pos:pos + npsi]
    psi[np.diag_indices_from(psi)] = d
    pos += npsi

    theta = template.Theta.copy()
    tmask = np.diag(template.free["Theta"])
    nth = int(np.count_nonzero(tmask))
    d = np.diag(theta).copy()
    d[tmask] = vector[pos:pos + nth]
    theta[np.diag_indices_from(theta)] = d

    return CovarianceStructure(B=b, Lambda=lam, Phi=phi, Psi=psi, Theta=theta,
                               free=dict(template.free))


# ----------------------------------------------------------------- fit results

@dataclass
class EstimationResult:
    """Everything one fit produces."""

    structure: CovarianceStructure
    theta: np.ndarray
    param_names: tuple[str, ...]
    implied_sigma: np.ndarray
    sample_cov: np.ndarray
    objective_value: float
    converged: bool
    iterations: int
    n_obs: int
    params: object = None            # MimicParams or EmimicParams
    std_errors: np.ndarray | None = None
    se_method: str | None = None
    fit: "FitReport | None" = None
    estimator: str | None = None
    var_names: tuple[str, ...] = ()
    resolved: ResolvedSpec | None = None
