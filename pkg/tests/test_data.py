import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sace.data import (
    DataError,
    Dataset,
    MissingState,
    ObservedGroup,
    PatientRecord,
    PrincipalStratum,
    classify_observed_group,
    feasible_strata,
    impute_covariates,
    inverse_standardize,
    load_csv,
    standardize,
    write_csv,
)

from conftest import make_record


HEADER = "id,z,t_z,s,t_s,m,y,x1,x2\n"


def write_file(tmp_path, rows, header=HEADER, name="data.csv"):
    path = tmp_path / name
    path.write_text(header + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


class TestRecordInvariants:
    def test_dead_with_outcome_rejected(self):
        with pytest.raises(DataError, match="censoring by death"):
            PatientRecord("p", 0, 9.0, 0, 9.0, MissingState.UNDEFINED, 18.2, np.zeros(1))

    def test_dead_needs_undefined_m(self):
        with pytest.raises(DataError, match="undefined"):
            PatientRecord("p", 0, 9.0, 0, 9.0, MissingState.OBSERVED, None, np.zeros(1))

    def test_survivor_observed_needs_outcome(self):
        with pytest.raises(DataError, match="finite outcome"):
            PatientRecord("p", 0, 18.0, 1, 30.0, MissingState.OBSERVED, None, np.zeros(1))

    def test_survivor_missing_forbids_outcome(self):
        with pytest.raises(DataError, match="absent"):
            PatientRecord("p", 0, 18.0, 1, 30.0, MissingState.MISSING, 20.0, np.zeros(1))

    def test_nonpositive_survival_time(self):
        with pytest.raises(DataError, match="t_s"):
            make_record(t_s=0.0)

    def test_untreated_t_z_rule(self):
        # died at 10 before the horizon: t_z must equal t_s
        rec = make_record(z=0, t_z=10.0, s=0, t_s=10.0)
        rec.check_treatment_time(18.0)
        bad = make_record(z=0, t_z=9.0, s=0, t_s=10.0)
        with pytest.raises(DataError, match="min\\(t_s, t_o\\)"):
            bad.check_treatment_time(18.0)

    def test_treated_t_z_bound(self):
        bad = make_record(z=1, t_z=12.0, s=0, t_s=10.0)
        with pytest.raises(DataError, match="t_z <= min"):
            bad.check_treatment_time(18.0)


class TestClassify:
    @pytest.mark.parametrize(
        "z,s,m,y,expected",
        [
            (1, 1, MissingState.OBSERVED, 20.0, ObservedGroup.O110),
            (1, 1, MissingState.MISSING, None, ObservedGroup.O111),
            (1, 0, MissingState.UNDEFINED, None, ObservedGroup.O10x),
            (0, 1, MissingState.OBSERVED, 20.0, ObservedGroup.O010),
            (0, 1, MissingState.MISSING, None, ObservedGroup.O011),
            (0, 0, MissingState.UNDEFINED, None, ObservedGroup.O00x),
        ],
    )
    def test_mapping(self, z, s, m, y, expected):
        t_s = 30.0 if s else 9.0
        rec = make_record(z=z, s=s, m=m, y=y, t_s=t_s, t_z=None)
        assert classify_observed_group(rec) == expected

    def test_every_record_in_exactly_one_group(self, six_group_dataset):
        groups = [classify_observed_group(r) for r in six_group_dataset.records]
        assert sorted(g.name for g in groups) == sorted(g.name for g in ObservedGroup)


class TestFeasibleStrata:
    def test_table_map(self):
        S = PrincipalStratum
        assert feasible_strata(ObservedGroup.O110) == (S.LL, S.LD)
        assert feasible_strata(ObservedGroup.O111) == (S.LL, S.LD)
        assert feasible_strata(ObservedGroup.O10x) == (S.DL, S.DD)
        assert feasible_strata(ObservedGroup.O010) == (S.LL, S.DL)
        assert feasible_strata(ObservedGroup.O011) == (S.LL, S.DL)
        assert feasible_strata(ObservedGroup.O00x) == (S.LD, S.DD)

    def test_monotonicity_removes_dl(self):
        S = PrincipalStratum
        assert feasible_strata(ObservedGroup.O010, monotonicity=True) == (S.LL,)
        assert feasible_strata(ObservedGroup.O10x, monotonicity=True) == (S.DD,)
        assert feasible_strata(ObservedGroup.O00x, monotonicity=True) == (S.LD, S.DD)

    def test_never_empty(self):
        for group in ObservedGroup:
            for mono in (False, True):
                assert feasible_strata(group, mono)

    def test_survival_letter_rule_exhaustive(self):
        # stratum feasible for O(z,s,.) iff its letter for arm z matches s
        for group in ObservedGroup:
            feasible = set(feasible_strata(group))
            for stratum in PrincipalStratum:
                matches = stratum.survives(group.z) == bool(group.s)
                assert (stratum in feasible) == matches


class TestLoadCsv:
    def test_rejects_outcome_despite_death(self, tmp_path):
        path = write_file(tmp_path, ["p1,0,9.0,0,9.0,NA,18.2,0.1,0.2"])
        with pytest.raises(DataError, match="row 1.*censoring by death"):
            load_csv(path)

    def test_accepts_untreated_death_rule(self, tmp_path):
        path = write_file(tmp_path, ["p1,0,10.0,0,10.0,NA,NA,0.1,0.2"])
        ds = load_csv(path, t_o=18.0)
        assert ds.n == 1 and ds.records[0].t_z == 10.0

    def test_815_row_file(self, tmp_path):
        rows = []
        for i in range(815):
            t = 1.0 + (i % 16)
            rows.append(f"p{i},0,{t},0,{t},NA,NA,{i % 7},0.5")
        path = write_file(tmp_path, rows)
        assert load_csv(path).n == 815

    def test_missing_column(self, tmp_path):
        path = write_file(tmp_path, ["p1,0,9.0,0,NA,NA,0.1"], header="id,z,t_z,s,m,y,x1\n")
        with pytest.raises(DataError, match="missing required column 't_s'"):
            load_csv(path)

    def test_malformed_row_names_row(self, tmp_path):
        rows = ["p1,0,9.0,0,9.0,NA,NA,0.1,0.2", "p2,0,9.0,0,9.0,0,NA,0.1,0.2"]
        path = write_file(tmp_path, rows)
        with pytest.raises(DataError, match="row 2.*m must be NA"):
            load_csv(path)

    def test_bad_number(self, tmp_path):
        path = write_file(tmp_path, ["p1,0,oops,0,9.0,NA,NA,0.1,0.2"])
        with pytest.raises(DataError, match="row 1.*'t_z'"):
            load_csv(path)

    def test_schema_rename_and_covariate_selection(self, tmp_path):
        header = "subject,z,t_z,s,t_s,m,y,x1,x2\n"
        path = write_file(tmp_path, ["p1,0,9.0,0,9.0,NA,NA,0.1,0.2"], header=header)
        ds = load_csv(path, schema={"id": "subject"}, covariates=["x2"])
        assert ds.covariate_names == ("x2",)
        assert ds.records[0].covariates[0] == 0.2

    def test_missing_covariate_cell_allowed(self, tmp_path):
        path = write_file(tmp_path, ["p1,0,9.0,0,9.0,NA,NA,NA,0.2"])
        ds = load_csv(path)
        assert np.isnan(ds.records[0].covariates[0])

    def test_round_trip(self, tmp_path, six_group_dataset):
        path = tmp_path / "out.csv"
        write_csv(six_group_dataset, path)
        back = load_csv(path)
        assert back.n == six_group_dataset.n
        for a, b in zip(back.records, six_group_dataset.records):
            assert a == b


class TestStandardize:
    def base(self, values):
        records = tuple(
            make_record(id=f"p{i}", t_s=5.0, covariates=(v,)) for i, v in enumerate(values)
        )
        return Dataset(records, covariate_names=("x1",))

    def test_basic_example(self):
        ds = standardize(self.base([1.0, 2.0, 3.0]), ["x1"])
        np.testing.assert_allclose(ds.column("x1"), [-1.0, 0.0, 1.0])
        assert ds.standardization["x1"] == (2.0, 1.0)

    def test_constant_column_error(self):
        with pytest.raises(DataError, match="'x1' has zero variance"):
            standardize(self.base([4.0, 4.0, 4.0]), ["x1"])

    def test_round_trip_exact(self):
        values = [3.1, -2.7, 8.9, 0.4, 5.5]
        ds = self.base(values)
        back = inverse_standardize(standardize(ds, ["x1"]))
        np.testing.assert_allclose(back.column("x1"), values, rtol=0, atol=1e-12)

    def test_idempotent(self):
        once = standardize(self.base([1.0, 2.0, 3.0, 9.0]), ["x1"])
        twice = standardize(once, ["x1"])
        np.testing.assert_allclose(twice.column("x1"), once.column("x1"), atol=1e-12)

    def test_unknown_column(self):
        with pytest.raises(DataError, match="unknown covariate"):
            standardize(self.base([1.0, 2.0]), ["nope"])

    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6),
            min_size=3,
            max_size=12,
            unique=True,
        )
    )
    def test_standardized_moments(self, values):
        ds = standardize(self.base(values), ["x1"])
        col = ds.column("x1")
        assert abs(col.mean()) < 1e-9
        assert abs(col.std(ddof=1) - 1.0) < 1e-9


class TestImpute:
    def base(self, col1, col2=None):
        col2 = col2 if col2 is not None else [0.0] * len(col1)
        records = tuple(
            make_record(id=f"p{i}", t_s=5.0, covariates=(a, b))
            for i, (a, b) in enumerate(zip(col1, col2))
        )
        return Dataset(records, covariate_names=("x1", "x2"))

    def test_mean_fill(self):
        ds, report = impute_covariates(self.base([1.0, np.nan, 3.0]))
        np.testing.assert_allclose(ds.column("x1"), [1.0, 2.0, 3.0])
        assert report == {"x1": 1, "x2": 0}

    def test_identity_when_complete(self):
        ds = self.base([1.0, 2.5, 3.0])
        done, report = impute_covariates(ds)
        np.testing.assert_array_equal(done.covariate_matrix(), ds.covariate_matrix())
        assert report == {"x1": 0, "x2": 0}

    def test_report_counts_by_enumeration(self):
        # 30% missing in one column: count the NaNs directly as the oracle
        values = [np.nan if i % 10 < 3 else float(i) for i in range(20)]
        expected = sum(1 for v in values if isinstance(v, float) and np.isnan(v))
        _, report = impute_covariates(self.base(values))
        assert report["x1"] == expected == 6

    def test_mode_for_binary_indicator(self):
        ds, _ = impute_covariates(self.base([1.0, 1.0, 0.0, np.nan]))
        assert ds.column("x1")[3] == 1.0
        # ties resolve to the smaller code
        ds, _ = impute_covariates(self.base([1.0, 1.0, 0.0, 0.0, np.nan]))
        assert ds.column("x1")[4] == 0.0
        # integer-looking scales still get the mean
        ds, _ = impute_covariates(self.base([1.0, 1.0, 2.0, np.nan]))
        assert ds.column("x1")[3] == pytest.approx(4.0 / 3.0)

    def test_fully_missing_column_error(self):
        with pytest.raises(DataError, match="no observed values"):
            impute_covariates(self.base([np.nan, np.nan, np.nan]))
