import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risk_engine.data import (
    DataError,
    Dataset,
    PredictorSpec,
    Schema,
    load_dataset,
    normalize_weights,
    scale_predictors,
    stratified_folds,
    write_dataset,
)

from conftest import make_dataset


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


HEADER = "id,group,cluster_id,weight,aud,cud,x1,x2"


class TestLoad:
    def test_three_valid_rows(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", "\n".join([
            HEADER,
            "a,A,s1,1.0,1,0,0.5,1",
            "b,B,s1,2.0,0,1,0.25,0",
            "c,C,s2,1.5,0,0,0.75,1",
        ]) + "\n")
        d = load_dataset(f, toy_schema)
        assert d.n == 3
        assert d.group_sizes == {"A": 1, "B": 1, "C": 1}
        assert d.weights.tolist() == [1.0, 2.0, 1.5]

    def test_structural_zero_rejected(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", "\n".join([
            HEADER,
            "a,A,s1,1.0,0,1,0.5,1",
        ]) + "\n")
        with pytest.raises(DataError, match="structural zero"):
            load_dataset(f, toy_schema)

    def test_out_of_range_predictor_rejected(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", "\n".join([
            HEADER,
            "a,B,s1,1.0,0,0,1.2,1",
        ]) + "\n")
        with pytest.raises(DataError, match="out of declared range"):
            load_dataset(f, toy_schema)

    def test_unknown_group_label_reports_row(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", "\n".join([
            HEADER,
            "a,B,s1,1.0,0,0,0.2,1",
            "b,Q,s1,1.0,0,0,0.2,1",
        ]) + "\n")
        with pytest.raises(DataError, match="row 3.*unknown group"):
            load_dataset(f, toy_schema)

    def test_unknown_column_rejected(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", HEADER + ",bogus\na,B,s1,1,0,0,0.2,1,9\n")
        with pytest.raises(DataError, match="unknown column"):
            load_dataset(f, toy_schema)

    def test_missing_weight_defaults_to_one(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", "\n".join([
            HEADER,
            "a,B,s1,,0,0,0.5,1",
        ]) + "\n")
        d = load_dataset(f, toy_schema)
        assert d.weights[0] == 1.0

    def test_malformed_row_reported(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv", HEADER + "\na,B,s1,1.0,0,0\n")
        with pytest.raises(DataError, match="expected 8 fields"):
            load_dataset(f, toy_schema)

    def test_outcomes_optional_for_prediction_inputs(self, tmp_path, toy_schema):
        f = write_csv(tmp_path / "d.csv",
                      "id,group,cluster_id,weight,x1,x2\na,B,s1,1.0,0.5,1\n")
        d = load_dataset(f, toy_schema, require_outcomes=False)
        assert d.n == 1 and not d.has_outcomes


class TestRoundTrip:
    def test_numeric_columns_bit_exact(self, tmp_path, toy_schema):
        d = make_dataset(toy_schema, n=40, seed=3,
                         weights=np.random.default_rng(5).uniform(0.1, 4.0, 40))
        path = tmp_path / "out.csv"
        write_dataset(d, path)
        d2 = load_dataset(path, toy_schema)
        assert np.array_equal(d.weights, d2.weights)
        assert np.array_equal(d.y, d2.y)
        assert np.array_equal(d.x, d2.x)
        assert d.ids == d2.ids


class TestScaling:
    def _raw(self, values, scaling_max=None):
        schema = Schema(predictors=(
            PredictorSpec(name="v", kind="continuous", scaling_max=scaling_max),))
        n = len(values)
        return Dataset(
            schema=schema,
            ids=tuple(str(i) for i in range(n)),
            groups=np.array(["B"] * n),
            cluster_ids=tuple("s" for _ in range(n)),
            weights=np.ones(n),
            y=np.zeros((n, 2)),
            raw={"v": np.asarray(values, dtype=float)},
            scaled=False,
        )

    def test_divide_by_max(self):
        d = scale_predictors(self._raw([0.0, 6.0, 12.0], scaling_max=12.0))
        assert d.raw["v"].tolist() == [0.0, 0.5, 1.0]
        assert d.schema.spec("v").scaling_max == 12.0

    def test_identity_on_scaled(self):
        d = scale_predictors(self._raw([0.0, 0.4, 1.0], scaling_max=1.0))
        assert d.raw["v"].tolist() == [0.0, 0.4, 1.0]

    def test_shift_then_scale(self):
        d = scale_predictors(self._raw([-2.0, 0.0, 2.0]))
        assert d.raw["v"].tolist() == [0.0, 0.5, 1.0]
        assert d.schema.spec("v").shift == 2.0
        assert d.schema.spec("v").scaling_max == 4.0

    def test_constant_predictor_rejected(self):
        with pytest.raises(DataError, match="'v'.*constant"):
            scale_predictors(self._raw([0.0, 0.0, 0.0]))

    def test_idempotent_with_unit_max(self):
        once = scale_predictors(self._raw([0.0, 0.4, 1.0], scaling_max=1.0))
        twice = scale_predictors(once)
        assert np.array_equal(once.raw["v"], twice.raw["v"])


class TestWeights:
    def test_uniform(self, toy_schema):
        d = make_dataset(toy_schema, n=3, weights=[2.0, 2.0, 2.0])
        assert normalize_weights(d).weights.tolist() == [1.0, 1.0, 1.0]

    def test_proportional(self, toy_schema):
        d = make_dataset(toy_schema, n=2, weights=[1.0, 3.0])
        assert normalize_weights(d).weights.tolist() == [0.5, 1.5]

    def test_sum_matches_n(self, toy_schema):
        rng = np.random.default_rng(0)
        d = make_dataset(toy_schema, n=37, weights=rng.uniform(0.01, 9, 37))
        nd = normalize_weights(d)
        assert abs(nd.weights.sum() - nd.n) / nd.n < 1e-9

    def test_all_zero_rejected(self, toy_schema):
        d = make_dataset(toy_schema, n=3, weights=[0.0, 0.0, 0.0])
        with pytest.raises(DataError, match="zero"):
            normalize_weights(d)

    def test_missing_weights_become_one(self, tmp_path, toy_schema):
        # external-validation mode: empty weight column loads as 1.0
        f = tmp_path / "d.csv"
        f.write_text(HEADER + "\na,B,s1,,0,0,0.5,1\nb,B,s1,,1,0,0.5,0\n",
                     encoding="utf-8")
        d = normalize_weights(load_dataset(f, toy_schema))
        assert d.weights.tolist() == [1.0, 1.0]


class TestFolds:
    def test_partition(self, toy_schema):
        d = make_dataset(toy_schema, n=100, seed=1)
        folds = stratified_folds(d, 5, seed=9)
        all_test = np.concatenate([t for _, t in folds])
        assert sorted(all_test.tolist()) == list(range(100))
        for train, test in folds:
            assert len(test) == 20
            assert set(train) | set(test) == set(range(100))
            assert not set(train) & set(test)

    def test_stratification_balance(self, toy_schema):
        # 50 B-group cases for the first outcome spread evenly across folds
        y = np.zeros((100, 2))
        y[:50, 0] = 1
        d = make_dataset(toy_schema, n=100, seed=2, groups_p=(0, 1, 0), y=y)
        folds = stratified_folds(d, 5, seed=0)
        for _, test in folds:
            cases = int(d.y[test, 0].sum())
            assert abs(cases - 10) <= 1

    def test_deterministic(self, toy_schema):
        d = make_dataset(toy_schema, n=60, seed=3)
        a = stratified_folds(d, 4, seed=11)
        b = stratified_folds(d, 4, seed=11)
        for (ta, sa), (tb, sb) in zip(a, b):
            assert np.array_equal(ta, tb) and np.array_equal(sa, sb)

    def test_k_larger_than_n(self, toy_schema):
        d = make_dataset(toy_schema, n=5, seed=4)
        with pytest.raises(DataError, match="exceeds"):
            stratified_folds(d, 6, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(12, 80), k=st.integers(2, 6), seed=st.integers(0, 10))
    def test_partition_property(self, n, k, seed):
        schema = Schema(predictors=(PredictorSpec(name="x1", kind="continuous",
                                                  scaling_max=1.0),))
        d = make_dataset(schema, n=n, seed=seed)
        folds = stratified_folds(d, k, seed=seed)
        assert len(folds) == k
        all_test = sorted(np.concatenate([t for _, t in folds]).tolist())
        assert all_test == list(range(n))


class TestStructuralZeros:
    def test_group_a_cud_rejected(self, toy_schema):
        y = np.zeros((2, 2))
        y[0, 1] = 1
        with pytest.raises(DataError, match="structural zero"):
            Dataset(
                schema=toy_schema,
                ids=("a", "b"),
                groups=np.array(["A", "B"]),
                cluster_ids=("s", "s"),
                weights=np.ones(2),
                y=y,
                raw={"x1": np.array([0.1, 0.2]), "x2": np.array([0.0, 1.0])},
            )

    def test_group_c_aud_rejected(self, toy_schema):
        y = np.zeros((2, 2))
        y[1, 0] = 1
        with pytest.raises(DataError, match="structural zero"):
            Dataset(
                schema=toy_schema,
                ids=("a", "b"),
                groups=np.array(["B", "C"]),
                cluster_ids=("s", "s"),
                weights=np.ones(2),
                y=y,
                raw={"x1": np.array([0.1, 0.2]), "x2": np.array([0.0, 1.0])},
            )
