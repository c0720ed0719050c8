"""Tests for core types, spec validation, and parameter packing."""

import numpy as np
import pytest

from mimicsem.exceptions import (
    DimensionMismatch,
    EndogenousWithoutIV,
    SpecError,
    Underidentified,
    UnknownColumn,
)
from mimicsem.model import (
    CovarianceStructure,
    Dataset,
    EstimationResult,
    MimicParams,
    ModelSpec,
    free_count,
    pack_params,
    static_free_count,
    unpack_params,
    validate_spec,
)


def make_dataset(names, n=20, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(values=rng.normal(size=(n, len(names))), names=tuple(names))


# ---------------------------------------------------------------------- dataset

class TestDataset:
    def test_basic_access(self):
        ds = Dataset(values=[[1.0, 2.0], [3.0, 4.0]], names=("a", "b"))
        assert ds.n_rows == 2
        assert ds.index_of("b") == 1
        np.testing.assert_array_equal(ds.column("a"), [1.0, 3.0])
        np.testing.assert_array_equal(ds.columns(("b", "a")),
                                      [[2.0, 1.0], [4.0, 3.0]])

    def test_empty_column_request(self):
        ds = make_dataset(["a", "b"], n=5)
        assert ds.columns(()).shape == (5, 0)

    def test_unknown_column(self):
        ds = make_dataset(["a", "b"])
        with pytest.raises(UnknownColumn):
            ds.column("z9")

    def test_values_read_only(self):
        ds = make_dataset(["a"])
        with pytest.raises(ValueError):
            ds.values[0, 0] = 99.0

    def test_duplicate_names_rejected(self):
        with pytest.raises(SpecError):
            Dataset(values=np.zeros((3, 2)), names=("a", "a"))

    def test_nonfinite_rejected(self):
        vals = np.ones((3, 2))
        vals[1, 1] = np.nan
        with pytest.raises(SpecError):
            Dataset(values=vals, names=("a", "b"))

    def test_too_few_rows(self):
        with pytest.raises(SpecError):
            Dataset(values=np.ones((1, 2)), names=("a", "b"))

    def test_name_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Dataset(values=np.ones((3, 2)), names=("a", "b", "c"))


# --------------------------------------------------------------- validate_spec

NAMES = ("y1", "y2", "y3", "x1", "x2", "w1", "w2")


class TestValidateSpec:
    def test_valid_static_spec(self):
        # 3 indicators, 2 causes: 3+2-1+3+3 = 10 free params, bound 15
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2", "y3"), causes=("x1", "x2"))
        rspec = validate_spec(spec, ds)
        assert rspec.free_count == 10
        assert static_free_count(3, 2) == 10
        assert rspec.indicator_idx == (0, 1, 2)
        assert rspec.cause_idx == (3, 4)
        assert rspec.scaling_index == 0

    def test_endogenous_without_instruments(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("x1", "x2"),
                         endogenous_causes=("x1",), estimator="TSLS_MIMIC")
        with pytest.raises(Underidentified):
            validate_spec(spec, ds)

    def test_unknown_column(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("z9",))
        with pytest.raises(UnknownColumn):
            validate_spec(spec, ds)

    def test_endogenous_needs_tsls_estimator(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("x1", "x2"),
                         endogenous_causes=("x1",), instruments=("w1",),
                         estimator="MIMIC")
        with pytest.raises(EndogenousWithoutIV):
            validate_spec(spec, ds)

    def test_shared_label_requires_endogenous_flag(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2", "x1"), causes=("x1", "x2"))
        with pytest.raises(SpecError):
            validate_spec(spec, ds)

    def test_shared_label_allowed_when_flagged(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2", "x1"), causes=("x1", "x2"),
                         endogenous_causes=("x1",), instruments=("w1", "w2"),
                         estimator="TSLS_MIMIC")
        rspec = validate_spec(spec, ds)
        assert rspec.endogenous_idx == (0,)

    def test_instrument_indicator_overlap_rejected(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("x1",),
                         instruments=("y1",))
        with pytest.raises(SpecError):
            validate_spec(spec, ds)

    def test_diagnostics_collected_exhaustively(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "z8"), causes=("z9",),
                         estimator="BOGUS")
        with pytest.raises(SpecError) as exc:
            validate_spec(spec, ds)
        msgs = [str(d) for d in exc.value.diagnostics]
        assert len(msgs) >= 3
        assert any("z8" in m for m in msgs)
        assert any("z9" in m for m in msgs)
        assert any("BOGUS" in m for m in msgs)

    def test_deterministic_diagnostics(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "z8"), causes=("z9",))
        outs = []
        for _ in range(2):
            with pytest.raises(SpecError) as exc:
                validate_spec(spec, ds)
            outs.append([str(d) for d in exc.value.diagnostics])
        assert outs[0] == outs[1]

    def test_bad_integration_tag(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("x1",),
                         integration_order={"x1": "I2"})
        with pytest.raises(SpecError):
            validate_spec(spec, ds)

    def test_integration_tag_for_noncause(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("x1",),
                         integration_order={"w1": "I1"})
        with pytest.raises(SpecError):
            validate_spec(spec, ds)

    def test_scaling_indicator_must_be_indicator(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1", "y2"), causes=("x1",),
                         scaling_indicator="x1")
        with pytest.raises(SpecError):
            validate_spec(spec, ds)

    def test_too_few_indicators(self):
        ds = make_dataset(NAMES)
        spec = ModelSpec(indicators=("y1",), causes=("x1",))
        with pytest.raises(SpecError):
            validate_spec(spec, ds)


# ----------------------------------------------------------------- MimicParams

class TestMimicParams:
    def test_derived_scalars_match_oracle(self):
        import oracle
        rng = np.random.default_rng(3)
        for _ in range(50):
            raw = oracle.random_mimic_params(rng, p=4, q=3)
            params = MimicParams(**raw)
            rho2 = raw["alpha"] @ raw["phi"] @ raw["alpha"]
            assert params.rho2 == pytest.approx(rho2, rel=1e-12)
            omega = np.outer(raw["beta"], raw["beta"]) + np.diag(raw["theta_diag"] ** 2)
            kappa2 = raw["beta"] @ np.linalg.inv(omega) @ raw["beta"]
            assert params.kappa2 == pytest.approx(kappa2, rel=1e-10)
            assert params.kappa2 == pytest.approx(
                params.pi2 / (1.0 + params.pi2), rel=1e-14)

    def test_nonpositive_theta_rejected(self):
        with pytest.raises(SpecError):
            MimicParams(alpha=[0.5], beta=[1.0, 0.8], theta_diag=[1.0, 0.0],
                        phi=[[1.0]])

    def test_asymmetric_phi_rejected(self):
        with pytest.raises(SpecError):
            MimicParams(alpha=[0.5, 0.2], beta=[1.0, 0.8],
                        theta_diag=[1.0, 1.0], phi=[[1.0, 0.5], [0.1, 1.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            MimicParams(alpha=[0.5], beta=[1.0, 0.8], theta_diag=[1.0],
                        phi=[[1.0]])


# ------------------------------------------------------ structure pack/unpack

def random_structure(rng, n=4, m=3, k=2):
    """Random structure with random masks (Phi mask symmetric)."""
    phi_raw = rng.normal(size=(k, k))
    phi = phi_raw @ phi_raw.T + k * np.eye(k)
    phi_mask = rng.random(size=(k, k)) < 0.5
    phi_mask = phi_mask | phi_mask.T
    return CovarianceStructure(
        B=rng.normal(size=(n, m)),
        Lambda=rng.normal(size=(m, k)),
        Phi=phi,
        Psi=np.diag(rng.uniform(0.1, 1.0, size=m)),
        Theta=np.diag(rng.uniform(0.1, 1.0, size=n)),
        free={"B": rng.random(size=(n, m)) < 0.5,
              "Lambda": rng.random(size=(m, k)) < 0.5,
              "Phi": phi_mask,
              "Psi": np.diag(rng.random(size=m) < 0.5),
              "Theta": np.diag(rng.random(size=n) < 0.5)})


class TestPackUnpack:
    def test_all_fixed_gives_empty_vector(self):
        s = CovarianceStructure(B=np.eye(2), Lambda=np.eye(2), Phi=np.eye(2),
                                Psi=np.zeros((2, 2)), Theta=np.zeros((2, 2)))
        assert free_count(s) == 0
        assert pack_params(s).shape == (0,)

    def test_round_trip_1000_structures(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            s = random_structure(rng)
            vec = pack_params(s)
            assert vec.shape == (free_count(s),)
            s2 = unpack_params(vec, s)
            for name in ("B", "Lambda", "Phi", "Psi", "Theta"):
                np.testing.assert_array_equal(getattr(s, name),
                                              getattr(s2, name))
            np.testing.assert_array_equal(pack_params(s2), vec)

    def test_wrong_length_rejected(self):
        rng = np.random.default_rng(1)
        s = random_structure(rng)
        with pytest.raises(DimensionMismatch):
            unpack_params(np.zeros(free_count(s) - 1), s)

    def test_fixed_cells_preserved(self):
        rng = np.random.default_rng(2)
        s = random_structure(rng)
        new_vec = rng.normal(size=free_count(s))
        s2 = unpack_params(new_vec, s)
        for name in ("B", "Lambda"):
            fixed = ~s.free[name]
            np.testing.assert_array_equal(getattr(s, name)[fixed],
                                          getattr(s2, name)[fixed])
        np.testing.assert_array_equal(s.Phi[~s.free["Phi"]],
                                      s2.Phi[~s.free["Phi"]])

    def test_unpack_keeps_phi_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s = random_structure(rng)
            s2 = unpack_params(rng.normal(size=free_count(s)), s)
            np.testing.assert_array_equal(s2.Phi, s2.Phi.T)

    def test_asymmetric_phi_mask_rejected(self):
        mask = np.zeros((2, 2), bool)
        mask[0, 1] = True
        with pytest.raises(SpecError):
            CovarianceStructure(B=np.eye(2), Lambda=np.eye(2), Phi=np.eye(2),
                                Psi=np.zeros((2, 2)), Theta=np.zeros((2, 2)),
                                free={"Phi": mask})

    def test_offdiagonal_theta_mask_rejected(self):
        mask = np.ones((2, 2), bool)
        with pytest.raises(SpecError):
            CovarianceStructure(B=np.eye(2), Lambda=np.eye(2), Phi=np.eye(2),
                                Psi=np.zeros((2, 2)), Theta=np.zeros((2, 2)),
                                free={"Theta": mask})

    def test_nondiagonal_theta_rejected(self):
        with pytest.raises(SpecError):
            CovarianceStructure(B=np.eye(2), Lambda=np.eye(2), Phi=np.eye(2),
                                Psi=np.zeros((2, 2)),
                                Theta=np.array([[1.0, 0.2], [0.2, 1.0]]))


def test_estimation_result_holds_fields():
    s = CovarianceStructure(B=np.eye(2), Lambda=np.eye(2), Phi=np.eye(2),
                            Psi=np.zeros((2, 2)), Theta=np.zeros((2, 2)))
    res = EstimationResult(structure=s, theta=np.zeros(0), param_names=(),
                          implied_sigma=np.eye(2), sample_cov=np.eye(2),
                          objective_value=2.0, converged=True, iterations=3,
                          n_obs=100)
    assert res.converged and res.fit is None
