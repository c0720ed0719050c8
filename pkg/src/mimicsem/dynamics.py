"""Time-series preprocessing for the error-correction path.

Integration-order classification through a one-lag augmented unit-root
regression, first differencing, long-run residuals from a levels regression,
and assembly of the error-correction design blocks.  Panel data are handled
as stacked units of equal length; differencing and lagging never cross a
unit boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .exceptions import ConstantSeries, DimensionMismatch, SeriesTooShort
from .model import Dataset, ResolvedSpec, validate_spec

ADF_CRITICAL_5PCT = -2.86
MIN_CLASSIFY_LENGTH = 10


def _split_units(values: np.ndarray, unit_length: int | None):
    if unit_length is None:
        return [values]
    if unit_length < 2:
        raise DimensionMismatch(f"unit_length must be >= 2, got {unit_length}")
    rows = values.shape[0]
    if rows % unit_length != 0:
        raise DimensionMismatch(
            f"{rows} rows do not divide into units of length {unit_length}")
    return np.split(values, rows // unit_length)


def adf_statistic(series) -> float:
    """t-statistic of the lagged level in a one-lag augmented regression.

    ds_t = c + g s_{t-1} + d ds_{t-1} + e_t; returns g over its standard
    error.  Values below the 5% critical point reject the unit root.
    """
    s = np.asarray(series, dtype=float).ravel()
    if s.size < MIN_CLASSIFY_LENGTH:
        raise SeriesTooShort(
            f"classification needs at least {MIN_CLASSIFY_LENGTH} points, "
            f"got {s.size}")
    if np.ptp(s) == 0.0:
        raise ConstantSeries("series has zero variance")
    ds = np.diff(s)
    resp = ds[1:]
    design = np.column_stack([np.ones(resp.size), s[1:-1], ds[:-1]])
    coef, *_ = np.linalg.lstsq(design, resp, rcond=None)
    resid = resp - design @ coef
    dof = resp.size - design.shape[1]
    s2 = float(resid @ resid) / dof
    xtx_inv = np.linalg.inv(design.T @ design)
    se = np.sqrt(s2 * xtx_inv[1, 1])
    return float(coef[1] / se)


@dataclass(frozen=True)
class SeriesClassification:
    """Per-cause integration tags with the statistics that produced them.

    statistics holds the unit-root t-value (nan when the spec pinned the
    order); overridden marks those pins.
    """

    tags: object
    statistics: object
    threshold: float = ADF_CRITICAL_5PCT
    overridden: object = field(default_factory=dict)

    def __post_init__(self):
        tags = dict(self.tags)
        stats = dict(self.statistics)
        over = dict(self.overridden)
        if set(stats) != set(tags) or (over and set(over) != set(tags)):
            raise DimensionMismatch(
                "classification mappings must cover the same labels")
        object.__setattr__(self, "tags", MappingProxyType(tags))
        object.__setattr__(self, "statistics", MappingProxyType(stats))
        object.__setattr__(self, "overridden",
                           MappingProxyType(over or {k: False for k in tags}))

    def order(self, label: str) -> str:
        return self.tags[label]

    def split(self, causes) -> tuple[tuple[str, ...], tuple[str, ...]]:
        """(I(1) causes, I(0) causes) in the given order."""
        i1 = tuple(c for c in causes if self.tags[c] == "I1")
        i0 = tuple(c for c in causes if self.tags[c] == "I0")
        return i1, i0


def classify_integration(data: Dataset, spec, *,
                         unit_length: int | None = None
                         ) -> SeriesClassification:
    """Tag every cause I0 or I1.

    Spec-declared orders win; the rest run the unit-root regression, per
    unit for panel input with the median statistic deciding.
    """
    rspec = spec if isinstance(spec, ResolvedSpec) else validate_spec(spec, data)
    mspec = rspec.spec
    tags = {}
    stats = {}
    overridden = {}
    for name in mspec.causes:
        declared = mspec.integration_order.get(name)
        if declared is not None:
            tags[name] = declared
            stats[name] = float("nan")
            overridden[name] = True
            continue
        column = data.column(name)
        per_unit = [adf_statistic(u) for u in _split_units(column, unit_length)]
        stat = float(np.median(per_unit))
        tags[name] = "I1" if stat > ADF_CRITICAL_5PCT else "I0"
        stats[name] = stat
        overridden[name] = False
    return SeriesClassification(tags=tags, statistics=stats,
                                threshold=ADF_CRITICAL_5PCT,
                                overridden=overridden)


def difference(series) -> np.ndarray:
    """First differences along time; one fewer row than the input."""
    return np.diff(np.asarray(series, dtype=float), axis=0)


def cointegration_residual(y, x, pi_mat) -> np.ndarray:
    """Long-run residuals z_t = y_t - Pi x_t, one row per time point."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim == 1:
        x = x[:, None]
    pi_mat = np.atleast_2d(np.asarray(pi_mat, dtype=float))
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(
            f"level series disagree on length: {y.shape[0]} vs {x.shape[0]}")
    if pi_mat.shape != (y.shape[1], x.shape[1]):
        raise DimensionMismatch(
            f"Pi must be {y.shape[1]}x{x.shape[1]}, got "
            f"{pi_mat.shape[0]}x{pi_mat.shape[1]}")
    return y - x @ pi_mat.T


def levels_pi(y, x) -> tuple[np.ndarray, np.ndarray]:
    """Static levels regression of y on x with an intercept.

    Returns (Pi, intercepts); the residual series y - Pi x - intercept is the
    equilibrium error the error-correction term lags.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    design = np.column_stack([np.ones(y.shape[0]), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef[1:].T, coef[0]


def build_ecm_design(data: Dataset, spec, classification: SeriesClassification,
                     *, unit_length: int | None = None):
    """Aligned blocks (dy, dx, v, z_lag) of the error-correction regression.

    dy and dx are first differences of the indicators and the I(1) causes,
    v holds the contemporaneous I(0) causes, and z_lag the lagged residuals
    of the pooled levels regression.  Every block has T-1 rows per unit.
    """
    rspec = spec if isinstance(spec, ResolvedSpec) else validate_spec(spec, data)
    mspec = rspec.spec
    i1, i0 = classification.split(mspec.causes)
    n_rows = data.values.shape[0]
    y_full = data.columns(mspec.indicators)
    x1_full = (data.columns(i1) if i1
               else np.empty((n_rows, 0)))
    v_full = (data.columns(i0) if i0
              else np.empty((n_rows, 0)))

    min_len = mspec.q + mspec.p + 3
    for unit in _split_units(y_full, unit_length):
        if unit.shape[0] < min_len:
            raise SeriesTooShort(
                f"error-correction design needs {min_len} points per unit, "
                f"got {unit.shape[0]}")

    if i1:
        pi_mat, intercept = levels_pi(y_full, x1_full)
        z_full = cointegration_residual(y_full, x1_full, pi_mat) - intercept
    else:
        z_full = y_full - y_full.mean(axis=0)

    dy_parts, dx_parts, v_parts, z_parts = [], [], [], []
    units = zip(_split_units(y_full, unit_length),
                _split_units(x1_full, unit_length),
                _split_units(v_full, unit_length),
                _split_units(z_full, unit_length))
    for y_u, x_u, v_u, z_u in units:
        dy_parts.append(difference(y_u))
        dx_parts.append(difference(x_u))
        v_parts.append(v_u[1:])
        z_parts.append(z_u[:-1])
    return (np.vstack(dy_parts), np.vstack(dx_parts),
            np.vstack(v_parts), np.vstack(z_parts))


def dmimic_transform(data: Dataset, spec, *,
                     unit_length: int | None = None) -> Dataset:
    """First-difference every column; the result feeds the static estimator."""
    if isinstance(spec, ResolvedSpec):
        rspec = spec
    else:
        rspec = validate_spec(spec, data)
    del rspec  # validation only; the transform applies to all columns
    values = data.values
    parts = []
    for unit in _split_units(values, unit_length):
        if unit.shape[0] < 2:
            raise SeriesTooShort("differencing needs at least 2 points per unit")
        parts.append(difference(unit))
    return Dataset(values=np.vstack(parts), names=data.names)
