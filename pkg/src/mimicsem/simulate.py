"""Scenario generators, the Monte Carlo comparison loop, and bootstrap SEs.

Three panel scenarios share one fixture: three causes driving a latent
variable read by three indicators, two external instruments, and one cause
made endogenous through a persistent shock that also enters every indicator
error.  Scenario 1 makes the last cause a random walk over 20 periods,
scenario 2 makes all three causes walks, and scenario 3 keeps all three
walks but lengthens each unit to 100 periods.

Units are deliberately heterogeneous: each carries a gamma-distributed
variance scale, a persistent lognormal volatility path, and its own
indicator-loading vector drawn around the common loadings.  Cross-unit
loading spread leaves per-unit measurement equations exact while denying any
single pooled loading vector, so levels-based fits face real misfit exactly
where cointegrating first stages absorb it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .estimators import EstimationResult, fit_model
from .evaluate import fit_indices
from .exceptions import MimicError, NonConvergence, SpecError, TooFewConverged
from .model import ESTIMATORS, Dataset, ModelSpec

CAUSE_COEF = np.array([0.8, 0.6, 0.4])
LOADINGS = np.array([1.0, 0.8, 0.6])
INDICATOR_SD = 0.5
INSTRUMENT_WEIGHT = 0.6
DEFAULT_ENDOGENEITY = 0.5

LATENT_AR = 0.5
LATENT_SD = 1.072381       # sqrt(1.15)
SHOCK_AR = 0.97
UNIT_SCALE_SHAPE = 0.5
VOL_AR = 0.5
VOL_SD = 2.4
LOADING_SPREAD = 0.64
LOADING_SPREAD_DIR = np.array([0.8995, -0.3786, 0.2183])

SCENARIO_LENGTH = MappingProxyType({1: 20, 2: 20, 3: 100})
SCENARIO_WALKS = MappingProxyType({1: 1, 2: 3, 3: 3})

COLUMNS = ("x1", "x2", "x3", "y1", "y2", "y3", "w1", "w2")

# shared instrument weight on two instruments leaves this much innovation
# variance for the endogeneity shock plus idiosyncratic noise
_FREE_INNOV_VAR = 1.0 - 2.0 * INSTRUMENT_WEIGHT**2
MAX_ENDOGENEITY = float(np.sqrt(_FREE_INNOV_VAR) - 1e-9)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario with its sampling plan.

    The time length and walk count per scenario are fixed; passing them
    explicitly is allowed only when they match the scenario's constants.
    """

    scenario: int
    t: int | None = None
    n_i1: int | None = None
    n_grid: tuple[int, ...] = (50, 100, 500, 2000)
    replications: int = 100
    resamples: int = 200
    base_seed: int = 0
    endogeneity: float = DEFAULT_ENDOGENEITY

    def __post_init__(self):
        if self.scenario not in SCENARIO_LENGTH:
            raise SpecError(f"scenario must be 1, 2 or 3, got {self.scenario!r}")
        for name, fixed in (("t", SCENARIO_LENGTH[self.scenario]),
                            ("n_i1", SCENARIO_WALKS[self.scenario])):
            given = getattr(self, name)
            if given is None:
                object.__setattr__(self, name, fixed)
            elif given != fixed:
                raise SpecError(
                    f"scenario {self.scenario} fixes {name}={fixed}, "
                    f"got {given}")
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if not self.n_grid or min(self.n_grid) < 2:
            raise SpecError(f"n_grid needs sizes >= 2, got {self.n_grid!r}")
        if self.replications < 1:
            raise SpecError(f"replications must be >= 1, got {self.replications}")
        if not 0.0 <= self.endogeneity <= MAX_ENDOGENEITY:
            raise SpecError(
                f"endogeneity must lie in [0, {MAX_ENDOGENEITY:.3f}] to keep "
                f"the innovation variance budget, got {self.endogeneity}")


def scenario_spec(estimator: str) -> ModelSpec:
    """Model specification the scenarios are analysed under."""
    if estimator not in ESTIMATORS:
        raise SpecError(f"unknown estimator {estimator!r}")
    kwargs = dict(indicators=("y1", "y2", "y3"), causes=("x1", "x2", "x3"),
                  estimator=estimator)
    if estimator.startswith("TSLS"):
        kwargs["instruments"] = ("w1", "w2")
        kwargs["endogenous_causes"] = ("x1",)
    return ModelSpec(**kwargs)


def _ar1(rng, t, rho, scale):
    """AR(1) path with stationary marginal SD scale[i] at every step."""
    x = np.empty(t)
    x[0] = rng.normal() * scale[0]
    innov = np.sqrt(1.0 - rho**2) * scale * rng.normal(size=t)
    for i in range(1, t):
        x[i] = rho * x[i - 1] + innov[i]
    return x


def generate_scenario(config: ScenarioConfig, N: int, seed) -> Dataset:
    """Draw a panel of N units for the configured scenario.

    Identical (config, N, seed) triples give bit-identical datasets.  The
    endogeneity level couples the first cause with all three indicator
    errors through a shared, highly persistent AR(1) shock; at zero the
    first cause is exogenous.
    """
    rng = np.random.default_rng(seed)
    t, knob = config.t, config.endogeneity
    noise_w = np.sqrt(_FREE_INNOV_VAR - knob**2)
    stationary = 3 - config.n_i1
    blocks = np.empty((N, t, len(COLUMNS)))
    ones = np.ones(t)
    for i in range(N):
        # per-unit variance scale times a slowly wandering volatility level;
        # both have unit mean so pinned population moments survive
        s_unit = rng.gamma(UNIT_SCALE_SHAPE, 1.0 / UNIT_SCALE_SHAPE)
        vol = np.exp(VOL_SD * _ar1(rng, t, VOL_AR, ones) - VOL_SD**2 / 2)
        sc = np.sqrt(s_unit * vol)
        shock = _ar1(rng, t, SHOCK_AR, sc)
        w = sc[:, None] * rng.normal(size=(t, 2))
        u = np.empty((t, 3))
        u[:, 0] = (INSTRUMENT_WEIGHT * (w[:, 0] + w[:, 1])
                   + noise_w * sc * rng.normal(size=t))
        u[:, 1:] = sc[:, None] * rng.normal(size=(t, 2))
        x = np.array(u)
        for j in range(stationary, 3):    # walks occupy the tail columns
            x[:, j] = np.cumsum(u[:, j])
        # shock enters the cause level after integration so its footprint in
        # the levels moments stays the same whether the cause walks or not
        x[:, 0] += knob * shock
        disturb = _ar1(rng, t, LATENT_AR, LATENT_SD * sc)
        eta = x @ CAUSE_COEF + disturb
        errors = (INDICATOR_SD * sc[:, None] * rng.normal(size=(t, 3))
                  + knob * shock[:, None])
        loadings = LOADINGS + LOADING_SPREAD * rng.normal() * LOADING_SPREAD_DIR
        blocks[i] = np.hstack([x, np.outer(eta, loadings) + errors, w])
    return Dataset(values=blocks.reshape(N * t, len(COLUMNS)), names=COLUMNS)


@dataclass(frozen=True)
class CellResult:
    """Medians and bookkeeping for one (N, estimator) grid cell."""

    median_rmsea: float
    median_srmr: float
    median_cfi: float
    n_converged: int
    n_failed: int


@dataclass(frozen=True)
class SimulationReport:
    """Full Monte Carlo grid for one scenario.

    cells maps (N, estimator) to a CellResult; every grid point is present.
    Medians are taken over converged replications only and are NaN when
    fewer than half converged.  failures lists (N, estimator, replication,
    message) for every fit that raised or did not converge.
    """

    config: ScenarioConfig
    cells: MappingProxyType
    failures: tuple
    runtime_s: float

    def cell(self, N: int, estimator: str) -> CellResult:
        return self.cells[(N, estimator)]


def _rep_seed(config: ScenarioConfig, N: int, rep: int):
    # independent stream per replication, stable under grid reordering
    return np.random.SeedSequence(
        (config.base_seed, config.scenario, N, rep))


def run_monte_carlo(config: ScenarioConfig,
                    estimators=ESTIMATORS) -> SimulationReport:
    """Fit every estimator on every replication of every grid size.

    All estimators see the same replication datasets.  Failed fits are
    recorded with their messages and excluded from the medians; nothing is
    silently dropped.
    """
    start = time.perf_counter()
    specs = {est: scenario_spec(est) for est in estimators}
    cells = {}
    failures = []
    for N in config.n_grid:
        stats = {est: {"rmsea": [], "srmr": [], "cfi": []} for est in estimators}
        failed = {est: 0 for est in estimators}
        for rep in range(config.replications):
            data = generate_scenario(config, N, _rep_seed(config, N, rep))
            for est in estimators:
                try:
                    result = fit_model(data, specs[est], unit_length=config.t,
                                       compute_se=False)
                    if not result.converged:
                        raise NonConvergence("optimizer did not converge")
                    report = fit_indices(result)
                except MimicError as exc:
                    failed[est] += 1
                    failures.append((N, est, rep, f"{type(exc).__name__}: {exc}"))
                    continue
                stats[est]["rmsea"].append(report.rmsea)
                stats[est]["srmr"].append(report.srmr)
                stats[est]["cfi"].append(report.cfi)
        for est in estimators:
            good = len(stats[est]["rmsea"])
            if 2 * good >= config.replications and good:
                meds = {k: float(np.median(v)) for k, v in stats[est].items()}
            else:
                meds = {k: float("nan") for k in stats[est]}
            cells[(N, est)] = CellResult(meds["rmsea"], meds["srmr"],
                                         meds["cfi"], good, failed[est])
    return SimulationReport(config=config, cells=MappingProxyType(cells),
                            failures=tuple(failures),
                            runtime_s=time.perf_counter() - start)


def bootstrap_se(data: Dataset, spec: ModelSpec, B: int, *,
                 unit_length: int | None = None, seed=0) -> dict:
    """Nonparametric unit-resampling standard errors.

    Draws B resamples of whole units with replacement, refits each, and
    reports the across-resample SD per parameter.  Deterministic per seed.
    Raises TooFewConverged when under half the resamples produce a
    converged fit.
    """
    if B < 50:
        raise SpecError(f"bootstrap needs B >= 50 resamples, got {B}")
    base = fit_model(data, spec, unit_length=unit_length, compute_se=False)
    if not base.converged:
        raise NonConvergence("bootstrap requires a converged fit on the "
                             "original data")
    values = np.asarray(data.values)
    length = unit_length if unit_length is not None else values.shape[0]
    units = values.reshape(values.shape[0] // length, length, values.shape[1])
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(B):
        pick = rng.integers(0, units.shape[0], size=units.shape[0])
        resample = Dataset(values=units[pick].reshape(values.shape),
                           names=data.names)
        try:
            refit = fit_model(data=resample, spec=spec,
                              unit_length=unit_length, compute_se=False)
        except MimicError:
            continue
        if refit.converged:
            draws.append(refit.theta)
    if 2 * len(draws) < B:
        raise TooFewConverged(
            f"only {len(draws)} of {B} bootstrap resamples converged")
    spread = np.std(np.array(draws), axis=0, ddof=1)
    return dict(zip(base.param_names, (float(s) for s in spread)))
