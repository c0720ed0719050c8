"""Tests for fit indices, latent scoring, and index construction."""

import numpy as np
import pytest
from scipy.optimize import brentq

from mimicsem.covariance import map_mimic
from mimicsem.evaluate import (
    FitReport,
    build_index,
    first_stage_proxy,
    fit_indices,
    predict_scores,
)
from mimicsem.exceptions import (
    NonPDOmega,
    RankDeficient,
    SingleGroup,
    SpecError,
    ZeroDf,
)
from mimicsem.mlfit import minimize
from mimicsem.model import Dataset, EstimationResult, MimicParams

PARAMS = MimicParams(alpha=np.array([0.8, 0.6, 0.4]),
                     beta=np.array([1.0, 0.8, 0.6]),
                     theta_diag=np.full(3, 0.5), phi=np.eye(3))


def shell_result(sigma, t_mat, n, k_free, params=None):
    """EstimationResult carrying just what the evaluators read."""
    return EstimationResult(structure=None, theta=np.zeros(k_free),
                            param_names=(), implied_sigma=sigma,
                            sample_cov=t_mat, objective_value=0.0,
                            converged=True, iterations=1, n_obs=n,
                            params=params)


def spd(rng, p):
    a = rng.normal(size=(p + 2, p))
    return a.T @ a / (p + 2) + np.eye(p)


class TestFitIndices:
    def test_saturated_fit_is_perfect(self):
        t_mat = spd(np.random.default_rng(0), 4)
        rep = fit_indices(shell_result(t_mat.copy(), t_mat, 500, 4))
        assert rep.chi2 == 0.0
        assert rep.rmsea == 0.0
        assert rep.srmr == 0.0
        assert rep.cfi == 1.0

    def test_rmsea_formula_value(self):
        # p=5 with 5 free parameters leaves df=10; an implied covariance
        # c*I against T=I has discrepancy 5(log c + 1/c), so choosing c with
        # log c + 1/c = 1.04 makes chi2 = 100*0.2 = 2*df, hence RMSEA = 0.1
        c = brentq(lambda v: np.log(v) + 1.0 / v - 1.04, 1.01, 3.0, xtol=1e-15)
        rep = fit_indices(shell_result(c * np.eye(5), np.eye(5), 101, 5))
        assert rep.df == 10
        assert abs(rep.chi2 - 20.0) < 1e-9
        assert abs(rep.rmsea - 0.1) < 1e-12

    def test_baseline_equal_to_fitted_gives_zero_cfi(self):
        t_mat = spd(np.random.default_rng(1), 4)
        rep = fit_indices(shell_result(np.diag(np.diag(t_mat)), t_mat, 300, 4))
        assert rep.chi2 == rep.chi2_baseline
        assert rep.df == rep.df_baseline
        assert rep.cfi == 0.0

    def test_zero_df_raises(self):
        t_mat = spd(np.random.default_rng(2), 4)
        with pytest.raises(ZeroDf):
            fit_indices(shell_result(t_mat.copy(), t_mat, 100, 10))

    def test_invariant_to_variable_ordering(self):
        rng = np.random.default_rng(3)
        t_mat = spd(rng, 5)
        sigma = t_mat + 0.1 * np.eye(5)
        perm = rng.permutation(5)
        base = fit_indices(shell_result(sigma, t_mat, 200, 3))
        swapped = fit_indices(shell_result(sigma[np.ix_(perm, perm)],
                                           t_mat[np.ix_(perm, perm)], 200, 3))
        assert abs(base.rmsea - swapped.rmsea) < 1e-12
        assert abs(base.srmr - swapped.srmr) < 1e-12
        assert abs(base.cfi - swapped.cfi) < 1e-12

    def test_well_specified_fit_scores_well(self):
        rng = np.random.default_rng(4)
        n = 3000
        x = rng.normal(size=(n, 3))
        eta = x @ PARAMS.alpha + rng.normal(size=n)
        y = np.outer(eta, PARAMS.beta) + 0.5 * rng.normal(size=(n, 3))
        obs = np.hstack([x, y])
        centered = obs - obs.mean(axis=0)
        t_mat = centered.T @ centered / n
        start = MimicParams(alpha=np.full(3, 0.3), beta=np.full(3, 0.8),
                            theta_diag=np.full(3, 0.7), phi=t_mat[:3, :3])
        result = minimize(map_mimic(start, fix_scaling=False), t_mat, n_obs=n)
        rep = fit_indices(result)
        assert rep.df > 0
        assert rep.rmsea < 0.05
        assert rep.srmr < 0.05
        assert rep.cfi > 0.95
        assert isinstance(rep, FitReport)


class TestPredictScores:
    def test_zero_residual_returns_signal(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(50, 3))
        y = np.outer(x @ PARAMS.alpha, PARAMS.beta)
        data = Dataset(values=np.hstack([x, y]),
                       names=("x1", "x2", "x3", "y1", "y2", "y3"))
        scores = predict_scores(
            shell_result(np.eye(6), np.eye(6), 50, 1, params=PARAMS), data)
        np.testing.assert_allclose(scores, x @ PARAMS.alpha, atol=1e-12)

    def test_noise_free_single_indicator_returns_indicator(self):
        rng = np.random.default_rng(6)
        params = MimicParams(alpha=np.array([0.5]), beta=np.array([1.0]),
                             theta_diag=np.array([1e-8]), phi=np.eye(1))
        x = rng.normal(size=(40, 1))
        y = 0.5 * x[:, 0] + rng.normal(size=40)
        data = Dataset(values=np.column_stack([x, y]), names=("x1", "y1"))
        scores = predict_scores(
            shell_result(np.eye(2), np.eye(2), 40, 1, params=params), data)
        np.testing.assert_allclose(scores, y, atol=1e-8)

    def test_singular_omega_raises(self):
        # error SDs below sqrt(float tiny) square to zero, leaving a rank-one
        # indicator covariance
        rng = np.random.default_rng(7)
        bad = MimicParams(alpha=np.array([0.5, 0.2]),
                          beta=np.array([1.0, 0.8]),
                          theta_diag=np.array([1e-200, 1e-200]), phi=np.eye(2))
        data = Dataset(values=rng.normal(size=(40, 4)),
                       names=("x1", "x2", "y1", "y2"))
        with pytest.raises(NonPDOmega):
            predict_scores(
                shell_result(np.eye(4), np.eye(4), 40, 1, params=bad), data)

    def test_missing_static_params_raises(self):
        rng = np.random.default_rng(8)
        data = Dataset(values=rng.normal(size=(20, 4)),
                       names=("x1", "x2", "y1", "y2"))
        with pytest.raises(SpecError):
            predict_scores(shell_result(np.eye(4), np.eye(4), 20, 1), data)

    def test_recovers_latent_on_simulated_data(self):
        rng = np.random.default_rng(9)
        n = 5000
        x = rng.normal(size=(n, 3))
        eta = x @ PARAMS.alpha + rng.normal(size=n)
        y = np.outer(eta, PARAMS.beta) + 0.5 * rng.normal(size=(n, 3))
        obs = np.hstack([x, y])
        names = ("x1", "x2", "x3", "y1", "y2", "y3")
        centered = obs - obs.mean(axis=0)
        t_mat = centered.T @ centered / n
        start = MimicParams(alpha=np.full(3, 0.3), beta=np.full(3, 0.8),
                            theta_diag=np.full(3, 0.7), phi=t_mat[:3, :3])
        result = minimize(map_mimic(start, fix_scaling=False), t_mat, n_obs=n)
        full = result.structure
        fitted = MimicParams(alpha=full.Lambda[3, :3].copy(),
                             beta=full.B[3:, 3].copy(),
                             theta_diag=np.abs(np.diag(full.Theta)[3:]),
                             phi=full.Phi[:3, :3].copy())
        scores = predict_scores(
            shell_result(np.eye(6), np.eye(6), n, 1, params=fitted),
            Dataset(values=obs, names=names))
        assert np.corrcoef(scores, eta)[0, 1] > 0.9

    def test_linear_in_observations(self):
        rng = np.random.default_rng(10)
        names = ("x1", "x2", "x3", "y1", "y2", "y3")
        a = rng.normal(size=(30, 6))
        b = rng.normal(size=(30, 6))
        result = shell_result(np.eye(6), np.eye(6), 30, 1, params=PARAMS)
        mixed = predict_scores(
            result, Dataset(values=0.3 * a + 0.7 * b, names=names))
        parts = (0.3 * predict_scores(result, Dataset(values=a, names=names))
                 + 0.7 * predict_scores(result, Dataset(values=b, names=names)))
        np.testing.assert_allclose(mixed, parts, atol=1e-12)


class TestBuildIndex:
    def test_linear_rescale(self):
        scores = np.array([2.0, 2.0, 5.0, 5.0, 8.0, 8.0])
        groups = np.array(["a", "a", "b", "b", "c", "c"])
        idx = build_index(scores, groups)
        assert idx["a"] == 0.0
        assert idx["b"] == 0.5
        assert idx["c"] == 1.0

    def test_extreme_groups_pinned_exactly(self):
        # country-style table: lowest group reads 0.00, highest 1.00
        rng = np.random.default_rng(11)
        countries = np.repeat(["Denmark", "France", "Greece"], 20)
        scores = np.concatenate([rng.normal(-0.9, 0.05, 20),
                                 rng.normal(0.1, 0.05, 20),
                                 rng.normal(1.1, 0.05, 20)])
        idx = build_index(scores, countries)
        assert idx["Denmark"] == 0.0
        assert idx["Greece"] == 1.0
        assert 0.0 < idx["France"] < 1.0

    def test_single_group_raises(self):
        with pytest.raises(SingleGroup):
            build_index(np.ones(5), np.repeat("only", 5))

    def test_invariant_to_positive_affine_transform(self):
        rng = np.random.default_rng(12)
        scores = rng.normal(size=90)
        groups = np.repeat(["g1", "g2", "g3"], 30)
        base = build_index(scores, groups)
        moved = build_index(3.7 * scores + 2.1, groups)
        for g in base:
            assert abs(base[g] - moved[g]) < 1e-12

    def test_tied_means_collapse_to_minimum(self):
        idx = build_index(np.array([1.0, 1.0, 1.0, 1.0]),
                          np.array(["a", "a", "b", "b"]))
        assert idx == {"a": 0.0, "b": 0.0}


class TestFirstStageProxy:
    def test_exact_relation_reproduced(self):
        rng = np.random.default_rng(13)
        z = rng.normal(size=(60, 3))
        endo = z @ np.array([1.0, -2.0, 0.5]) + 3.0
        data = Dataset(values=np.column_stack([endo, z]),
                       names=("endo", "a", "b", "c"))
        fitted, r2 = first_stage_proxy(data, "endo", ("a", "b", "c"))
        np.testing.assert_allclose(fitted, endo, atol=1e-10)
        assert r2 > 0.999999

    def test_orthogonal_predictors_return_mean(self):
        rng = np.random.default_rng(14)
        endo = rng.normal(size=60)
        z = rng.normal(size=(60, 2))
        proj = np.column_stack([np.ones(60), endo])
        z = z - proj @ np.linalg.lstsq(proj, z, rcond=None)[0]
        data = Dataset(values=np.column_stack([endo, z]),
                       names=("endo", "a", "b"))
        fitted, r2 = first_stage_proxy(data, "endo", ("a", "b"))
        np.testing.assert_allclose(fitted, np.full(60, endo.mean()),
                                   atol=1e-12)
        assert abs(r2) < 1e-12

    def test_many_predictors_with_dummies(self):
        rng = np.random.default_rng(15)
        n = 400
        cont = rng.normal(size=(n, 16))
        membership = rng.integers(0, 5, size=n)
        dummies = (membership[:, None] == np.arange(1, 5)).astype(float)
        z = np.hstack([cont, dummies])
        endo = z @ rng.normal(scale=0.3, size=20) + rng.normal(size=n)
        names = ("endo",) + tuple(f"p{i}" for i in range(20))
        data = Dataset(values=np.column_stack([endo, z]), names=names)
        fitted, r2 = first_stage_proxy(data, "endo", names[1:])
        assert fitted.shape == (n,)
        assert 0.0 < r2 < 1.0

    def test_collinear_predictors_raise(self):
        rng = np.random.default_rng(16)
        col = rng.normal(size=60)
        endo = rng.normal(size=60)
        data = Dataset(values=np.column_stack([endo, col, 2 * col]),
                       names=("endo", "a", "b"))
        with pytest.raises(RankDeficient):
            first_stage_proxy(data, "endo", ("a", "b"))

    def test_too_few_rows_raise(self):
        rng = np.random.default_rng(17)
        vals = rng.normal(size=(4, 6))
        names = ("endo", "a", "b", "c", "d", "e")
        with pytest.raises(RankDeficient):
            first_stage_proxy(Dataset(values=vals, names=names), "endo",
                              names[1:])
