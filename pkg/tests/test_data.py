import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalgrove.data import (
    Dataset,
    SchemaConfig,
    SchoolEffectSpec,
    build_cluster_index,
    load_csv,
    simulate_confounded,
    simulate_school_data,
    split_clusters_kfold,
    write_dataset_csv,
    write_oracle_csv,
)
from causalgrove.errors import (
    ParameterError,
    ParseError,
    SchemaError,
    ValidationError,
)


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


BASIC_SCHEMA = SchemaConfig(outcome_column="Y", treatment_column="W",
                            cluster_column="school")


class TestLoadCsv:
    def test_numeric_passthrough_and_clusters(self, tmp_path):
        path = write(tmp_path, "a,b,Y,W,school\n1,2,0.5,1,s1\n3,4,1.5,0,s2\n5,6,2.5,1,s1\n")
        d = load_csv(path, BASIC_SCHEMA)
        assert d.n == 3 and d.p == 2
        assert d.feature_names == ("a", "b")
        np.testing.assert_array_equal(d.features[:, 0], [1, 3, 5])
        np.testing.assert_array_equal(d.cluster_id, [0, 1, 0])
        assert d.cluster_labels == ("s1", "s2")

    def test_one_hot_levels(self, tmp_path):
        path = write(tmp_path, "c,Y,W\na,0,0\nb,1,1\na,2,0\n")
        schema = SchemaConfig("Y", "W", categorical_columns=("c",))
        d = load_csv(path, schema)
        assert d.feature_names == ("c.a", "c.b")
        np.testing.assert_array_equal(d.features[:, 0], [1, 0, 1])
        np.testing.assert_array_equal(d.features[:, 1], [0, 1, 0])

    def test_study_shaped_expansion_gives_28_columns(self, tmp_path):
        # 10 source covariates; 3 categoricals expand 7 numerics to 28 total.
        rng = np.random.default_rng(0)
        rows = ["n1,n2,n3,n4,n5,n6,n7,c1,c2,c3,Y,W"]
        c1 = [f"l{i}" for i in range(10)]
        c2 = [f"m{i}" for i in range(6)]
        c3 = [f"k{i}" for i in range(5)]
        for i in range(200):
            nums = ",".join(str(round(v, 3)) for v in rng.normal(size=7))
            rows.append(f"{nums},{c1[i % 10]},{c2[i % 6]},{c3[i % 5]},"
                        f"{round(rng.normal(), 3)},{i % 2}")
        path = write(tmp_path, "\n".join(rows) + "\n")
        schema = SchemaConfig("Y", "W", categorical_columns=("c1", "c2", "c3"))
        d = load_csv(path, schema)
        assert d.p == 28

    def test_one_hot_rows_sum_to_one(self, tmp_path):
        rng = np.random.default_rng(1)
        lines = ["c,d,Y,W"]
        for i in range(50):
            lines.append(f"v{rng.integers(4)},g{rng.integers(3)},0.0,{i % 2}")
        path = write(tmp_path, "\n".join(lines) + "\n")
        schema = SchemaConfig("Y", "W", categorical_columns=("c", "d"))
        d = load_csv(path, schema)
        c_cols = [j for j, n in enumerate(d.feature_names) if n.startswith("c.")]
        d_cols = [j for j, n in enumerate(d.feature_names) if n.startswith("d.")]
        np.testing.assert_allclose(d.features[:, c_cols].sum(axis=1), 1.0)
        np.testing.assert_allclose(d.features[:, d_cols].sum(axis=1), 1.0)

    def test_single_row_no_cluster_column(self, tmp_path):
        path = write(tmp_path, "a,Y,W\n1.0,2.0,1\n")
        d = load_csv(path, SchemaConfig("Y", "W"))
        assert d.n == 1 and d.n_clusters == 1
        np.testing.assert_array_equal(d.cluster_id, [0])

    def test_missing_column_is_schema_error(self, tmp_path):
        path = write(tmp_path, "a,Y\n1,2\n")
        with pytest.raises(SchemaError):
            load_csv(path, SchemaConfig("Y", "W"))

    def test_non_numeric_reports_line(self, tmp_path):
        path = write(tmp_path, "a,Y,W\n1,2,0\noops,3,1\n")
        with pytest.raises(ParseError, match="line 3"):
            load_csv(path, SchemaConfig("Y", "W"))

    def test_bad_treatment_value(self, tmp_path):
        path = write(tmp_path, "a,Y,W\n1,2,0\n2,3,2\n")
        with pytest.raises(ValidationError, match="treatment"):
            load_csv(path, SchemaConfig("Y", "W"))

    def test_missing_value_rejected(self, tmp_path):
        path = write(tmp_path, "a,Y,W\n1,2,0\n,3,1\n")
        with pytest.raises(ValidationError, match="missing"):
            load_csv(path, SchemaConfig("Y", "W"))

    def test_roundtrip_through_writer(self, tmp_path):
        d, oracle = simulate_school_data(4, 6, seed=3)
        path = tmp_path / "rt.csv"
        write_dataset_csv(d, path)
        d2 = load_csv(path, SchemaConfig("Y", "W", cluster_column="cluster"))
        np.testing.assert_array_equal(d2.features, d.features)
        np.testing.assert_array_equal(d2.outcome, d.outcome)
        np.testing.assert_array_equal(d2.cluster_id, d.cluster_id)


class TestDatasetInvariants:
    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            Dataset.from_arrays(np.array([[np.nan]]), [1.0], [0.0])

    def test_rejects_fractional_treatment(self):
        with pytest.raises(ValidationError):
            Dataset.from_arrays(np.ones((2, 1)), [1.0, 2.0], [0.5, 1.0])

    def test_schema_role_columns_disjoint(self):
        with pytest.raises(SchemaError):
            SchemaConfig("Y", "Y")
        with pytest.raises(SchemaError):
            SchemaConfig("Y", "W", categorical_columns=("Y",))


class TestClusterIndex:
    def test_grouping_by_first_appearance(self):
        d = Dataset.from_arrays(np.zeros((3, 1)), [0, 0, 0], [0, 0, 0],
                                cluster=[7, 7, 3])
        idx = build_cluster_index(d)
        assert idx.n_clusters == 2
        np.testing.assert_array_equal(idx.members[0], [0, 1])
        np.testing.assert_array_equal(idx.members[1], [2])
        np.testing.assert_array_equal(idx.sizes, [2, 1])
        assert idx.labels == (7, 3)

    def test_all_distinct(self):
        d = Dataset.from_arrays(np.zeros((4, 1)), np.zeros(4), np.zeros(4))
        idx = build_cluster_index(d)
        assert idx.n_clusters == 4
        np.testing.assert_array_equal(idx.sizes, np.ones(4))

    def test_single_cluster(self):
        d = Dataset.from_arrays(np.zeros((5, 1)), np.zeros(5), np.zeros(5),
                                cluster=np.full(5, "only"))
        idx = build_cluster_index(d)
        assert idx.n_clusters == 1 and idx.sizes[0] == 5

    def test_partition_property(self):
        d, _ = simulate_school_data(7, 9, seed=0)
        idx = build_cluster_index(d)
        combined = np.sort(np.concatenate(idx.members))
        np.testing.assert_array_equal(combined, np.arange(d.n))


class TestKfold:
    def test_balanced_76_into_5(self):
        d, _ = simulate_school_data(76, 3, seed=0)
        idx = build_cluster_index(d)
        assignment = split_clusters_kfold(idx, 5, seed=11)
        counts = np.bincount(assignment, minlength=5)
        assert sorted(counts.tolist()) == [15, 15, 15, 15, 16]

    def test_leave_one_cluster_out(self):
        d, _ = simulate_school_data(6, 4, seed=0)
        idx = build_cluster_index(d)
        assignment = split_clusters_kfold(idx, 6, seed=2)
        assert sorted(assignment.tolist()) == list(range(6))

    def test_deterministic(self):
        d, _ = simulate_school_data(10, 4, seed=0)
        idx = build_cluster_index(d)
        a = split_clusters_kfold(idx, 3, seed=5)
        b = split_clusters_kfold(idx, 3, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_too_many_folds(self):
        d, _ = simulate_school_data(3, 4, seed=0)
        idx = build_cluster_index(d)
        with pytest.raises(ParameterError):
            split_clusters_kfold(idx, 4, seed=0)

    @settings(deadline=None, max_examples=25)
    @given(J=st.integers(2, 40), folds=st.integers(1, 8), seed=st.integers(0, 999))
    def test_partition_property(self, J, folds, seed):
        folds = min(folds, J)
        d, _ = simulate_school_data(J, 2, seed=0)
        idx = build_cluster_index(d)
        assignment = split_clusters_kfold(idx, folds, seed=seed)
        assert assignment.shape == (J,)
        counts = np.bincount(assignment, minlength=folds)
        assert counts.max() - counts.min() <= 1
        assert (assignment >= 0).all() and (assignment < folds).all()


class TestSimulateConfounded:
    def test_shape_and_reproducibility(self):
        d1, p1, c1 = simulate_confounded(1000, 10, seed=4)
        d2, p2, c2 = simulate_confounded(1000, 10, seed=4)
        assert d1.n == 1000 and d1.p == 10 and d1.n_clusters == 1000
        np.testing.assert_array_equal(d1.features, d2.features)
        np.testing.assert_array_equal(d1.treatment, d2.treatment)
        np.testing.assert_array_equal(p1, p2)

    def test_true_cate_is_zero(self):
        _, _, cate = simulate_confounded(50, 6, seed=0)
        assert (cate == 0).all()

    def test_propensity_mean_near_half(self):
        _, propensity, _ = simulate_confounded(1000, 10, seed=8)
        assert abs(propensity.mean() - 0.5) < 0.05

    def test_p_too_small(self):
        with pytest.raises(ParameterError):
            simulate_confounded(10, 5, seed=0)

    def test_null_effect_monte_carlo(self):
        # With no true effect, the oracle-adjusted treated/control outcome
        # means agree in the limit; check at n = 1e5.
        d, propensity, _ = simulate_confounded(100_000, 6, seed=123)
        w = d.treatment
        ipw_treated = np.mean(w * d.outcome / propensity)
        ipw_control = np.mean((1 - w) * d.outcome / (1 - propensity))
        assert abs(ipw_treated - ipw_control) < 0.05


class TestSimulateSchool:
    def test_constant_effect_oracle(self):
        spec = SchoolEffectSpec(base_effect=0.25, effect_step=0.0,
                                cluster_effect_sd=0.0)
        d, oracle = simulate_school_data(5, 8, spec, seed=1)
        np.testing.assert_allclose(oracle.true_cate, 0.25)
        np.testing.assert_allclose(oracle.cluster_effect, 0.0)
        np.testing.assert_allclose(oracle.true_propensity, 0.5)

    def test_equal_cluster_weighting_with_size_spread(self):
        spec = SchoolEffectSpec(base_effect=0.3, effect_step=0.0,
                                cluster_size_spread=6.0)
        d, oracle = simulate_school_data(8, 12, spec, seed=5)
        idx = build_cluster_index(d)
        assert np.ptp(idx.sizes) > 0
        per_cluster = [oracle.true_cate[m].mean() for m in idx.members]
        assert abs(np.mean(per_cluster) - 0.3) < 1e-12

    def test_study_shape(self):
        spec = SchoolEffectSpec(n_student_covariates=23, n_school_covariates=5,
                                cluster_effect_sd=0.1, cluster_size_spread=20.0)
        d, _ = simulate_school_data(76, 137, spec, seed=2)
        assert d.n_clusters == 76 and d.p == 28
        assert abs(d.n - 76 * 137) < 76 * 137 * 0.2

    def test_school_covariates_constant_within_cluster(self):
        d, _ = simulate_school_data(6, 10, seed=9)
        idx = build_cluster_index(d)
        z_cols = [j for j, n in enumerate(d.feature_names) if n.startswith("z")]
        for members in idx.members:
            for j in z_cols:
                assert np.ptp(d.features[members, j]) == 0.0

    def test_outcome_model_identity(self):
        spec = SchoolEffectSpec(base_effect=0.4, effect_step=0.3,
                                main_effect_scale=0.7, main_effect_sd=0.5,
                                cluster_effect_sd=0.2, noise_sd=0.0)
        d, oracle = simulate_school_data(4, 20, spec, seed=11)
        s1 = d.features[:, 0]
        expected = (0.7 * s1 + d.treatment * (oracle.true_cate +
                                              oracle.cluster_effect)
                    + oracle.main_offset)
        np.testing.assert_allclose(d.outcome, expected, atol=1e-12)

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            simulate_school_data(1, 10, seed=0)
        with pytest.raises(ParameterError):
            SchoolEffectSpec(noise_sd=-1.0)
        with pytest.raises(ParameterError):
            SchoolEffectSpec(propensity=1.5)


def test_oracle_sidecar_columns(tmp_path):
    d, oracle = simulate_school_data(3, 5, seed=0)
    path = tmp_path / "oracle.csv"
    write_oracle_csv(oracle, path)
    header = path.read_text().splitlines()[0]
    assert header == "true_propensity,true_cate,cluster_effect"
