import statistics

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coxsub import Cohort, CsvSchema, DataError, censoring_split, load_csv, save_csv, sort_cohort
from conftest import random_cohort

from oracles import risk_set_size


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestCohortValidation:
    def test_basic_construction(self):
        cohort = Cohort(np.array([[1.0], [2.0]]), [1.0, 2.0], [1, 0])
        assert cohort.n == 2 and cohort.p == 1 and len(cohort) == 2

    def test_record_roundtrip(self):
        cohort = Cohort(np.array([[1.0, 2.0]]), [3.0], [1])
        rec = cohort.record(0)
        assert rec.time == 3.0 and rec.status == 1
        npt.assert_array_equal(rec.covariates, [1.0, 2.0])
        rebuilt = Cohort.from_records([rec])
        npt.assert_array_equal(rebuilt.covariates, cohort.covariates)

    @pytest.mark.parametrize(
        "z,t,d",
        [
            (np.empty((0, 1)), [], []),
            ([[np.nan]], [1.0], [1]),
            ([[1.0]], [-1.0], [1]),
            ([[1.0]], [np.inf], [1]),
            ([[1.0]], [1.0], [2]),
        ],
    )
    def test_invalid_inputs_rejected(self, z, t, d):
        with pytest.raises(DataError):
            Cohort(np.asarray(z, dtype=float).reshape(-1, 1), t, d)

    def test_arrays_are_frozen(self):
        cohort = Cohort(np.array([[1.0]]), [1.0], [1])
        with pytest.raises(ValueError):
            cohort.time[0] = 2.0


class TestSortCohort:
    def test_sorts_times_ascending(self):
        cohort = Cohort(np.zeros((3, 1)), [3.0, 1.0, 2.0], [1, 1, 1])
        sc = sort_cohort(cohort)
        npt.assert_array_equal(sc.order, [1, 2, 0])
        assert sc.event_times.size == 3

    def test_zero_events(self):
        cohort = Cohort(np.zeros((4, 1)), [1.0, 2.0, 3.0, 4.0], [0, 0, 0, 0])
        sc = sort_cohort(cohort)
        assert sc.event_times.size == 0
        assert sc.censoring_rate == 1.0
        assert sc.s1_index.size == 0

    def test_events_precede_censorings_at_ties(self):
        cohort = Cohort(np.zeros((4, 1)), [2.0, 2.0, 2.0, 1.0], [0, 1, 0, 1])
        sc = sort_cohort(cohort)
        # sorted: t=1 event, then at t=2 the event before both censorings
        npt.assert_array_equal(sc.status_sorted, [1, 1, 0, 0])
        # censored records at t=2 remain at risk for the t=2 event
        k = np.searchsorted(sc.event_times, 2.0)
        assert sc.n - sc.risk_boundary[k] == 3

    def test_risk_set_sizes_match_bruteforce(self, rng):
        t = rng.integers(1, 50, size=1000).astype(float)  # heavy ties
        d = (rng.random(1000) < 0.6).astype(int)
        cohort = Cohort(rng.standard_normal((1000, 2)), t, d)
        sc = sort_cohort(cohort)
        for k, tk in enumerate(sc.event_times):
            assert sc.n - sc.risk_boundary[k] == risk_set_size(t, tk)

    def test_event_counts_and_multiplicity(self):
        cohort = Cohort(np.zeros((5, 1)), [1.0, 1.0, 2.0, 2.0, 2.0], [1, 1, 1, 1, 0])
        sc = sort_cohort(cohort)
        npt.assert_array_equal(sc.event_times, [1.0, 2.0])
        npt.assert_array_equal(sc.event_counts, [2, 2])

    def test_deterministic_permutation(self, rng):
        cohort = random_cohort(rng, n=50)
        a = sort_cohort(cohort)
        b = sort_cohort(Cohort(cohort.covariates.copy(), cohort.time.copy(), cohort.status.copy()))
        npt.assert_array_equal(a.order, b.order)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_order_is_total_permutation(self, seed):
        cohort = random_cohort(np.random.default_rng(seed), n=30)
        sc = sort_cohort(cohort)
        assert np.array_equal(np.sort(sc.order), np.arange(30))
        assert np.all(np.diff(sc.time_sorted) >= 0)
        assert sc.s0_index.size + sc.s1_index.size == 30
        assert set(sc.s0_index).isdisjoint(set(sc.s1_index))


class TestCensoringSplit:
    def test_simple_split(self):
        cohort = Cohort(np.zeros((3, 1)), [1.0, 2.0, 3.0], [1, 0, 1])
        s0, s1 = censoring_split(cohort)
        npt.assert_array_equal(s0, [1])
        npt.assert_array_equal(s1, [0, 2])

    def test_all_censored(self):
        cohort = Cohort(np.zeros((3, 1)), [1.0, 2.0, 3.0], [0, 0, 0])
        s0, s1 = censoring_split(cohort)
        assert s1.size == 0 and s0.size == 3

    def test_matches_sorted_cohort_fields(self, rng):
        cohort = random_cohort(rng)
        sc = sort_cohort(cohort)
        s0, s1 = censoring_split(cohort)
        npt.assert_array_equal(s0, sc.s0_index)
        npt.assert_array_equal(s1, sc.s1_index)
        assert s1.size == round((1 - sc.censoring_rate) * cohort.n)


class TestLoadCsv:
    def test_three_row_file(self, tmp_path):
        path = write(tmp_path, "time,status,z1\n1,1,0.5\n2,0,1.5\n3,1,2.5\n")
        cohort = load_csv(path, CsvSchema("time", "status", ("z1",)))
        assert cohort.n == 3 and cohort.p == 1
        npt.assert_array_equal(cohort.time, [1.0, 2.0, 3.0])
        npt.assert_array_equal(cohort.status, [1, 0, 1])

    def test_nonbinary_status_names_row(self, tmp_path):
        path = write(tmp_path, "time,status,z1\n1,1,0.5\n2,2,1.5\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(path, CsvSchema("time", "status", ("z1",)))

    def test_unparseable_cell_names_row(self, tmp_path):
        path = write(tmp_path, "time,status,z1\n1,1,0.5\nxx,1,1.5\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(path, CsvSchema("time", "status", ("z1",)))

    def test_empty_file(self, tmp_path):
        path = write(tmp_path, "")
        with pytest.raises(DataError, match="empty"):
            load_csv(path, CsvSchema("time", "status", ("z1",)))

    def test_header_only(self, tmp_path):
        path = write(tmp_path, "time,status,z1\n")
        with pytest.raises(DataError, match="no data rows"):
            load_csv(path, CsvSchema("time", "status", ("z1",)))

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "time,status\n1,1\n")
        with pytest.raises(DataError, match="z1"):
            load_csv(path, CsvSchema("time", "status", ("z1",)))

    def test_median_fill_matches_independent_median(self, tmp_path, rng):
        values = rng.normal(size=50).round(3)
        holes = set(rng.choice(50, size=5, replace=False).tolist())
        lines = ["time,status,z1"]
        for i, v in enumerate(values):
            cell = "" if i in holes else repr(float(v))
            lines.append(f"{i + 1},1,{cell}")
        path = write(tmp_path, "\n".join(lines) + "\n")
        schema = CsvSchema("time", "status", ("z1",), median_fill=frozenset({"z1"}))
        cohort = load_csv(path, schema)
        observed = [float(v) for i, v in enumerate(values) if i not in holes]
        expected = statistics.median(observed)
        for i in holes:
            assert cohort.covariates[i, 0] == expected

    def test_missing_without_fill_rejected(self, tmp_path):
        path = write(tmp_path, "time,status,z1\n1,1,\n")
        with pytest.raises(DataError, match="median fill"):
            load_csv(path, CsvSchema("time", "status", ("z1",)))

    def test_categorical_expansion(self, tmp_path):
        path = write(
            tmp_path,
            "time,status,sector,z1\n1,1,retail,0.5\n2,0,farm,1.0\n3,1,mining,1.5\n4,1,retail,2.0\n",
        )
        schema = CsvSchema("time", "status", ("sector", "z1"), categorical=frozenset({"sector"}))
        cohort = load_csv(path, schema)
        # levels sorted: farm (baseline), mining, retail
        assert cohort.feature_names == ("sector=mining", "sector=retail", "z1")
        npt.assert_array_equal(cohort.covariates[:, 0], [0, 0, 1, 0])
        npt.assert_array_equal(cohort.covariates[:, 1], [1, 0, 0, 1])

    def test_missing_categorical_rejected(self, tmp_path):
        path = write(tmp_path, "time,status,sector\n1,1,NA\n")
        schema = CsvSchema("time", "status", ("sector",), categorical=frozenset({"sector"}))
        with pytest.raises(DataError, match="categorical"):
            load_csv(path, schema)

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        cohort = random_cohort(rng, n=30, p=3)
        out = tmp_path / "cohort.csv"
        save_csv(cohort, out)
        back = load_csv(out, CsvSchema("time", "status", ("z1", "z2", "z3")))
        npt.assert_array_equal(back.covariates, cohort.covariates)
        npt.assert_array_equal(back.time, cohort.time)
        npt.assert_array_equal(back.status, cohort.status)

    def test_schema_requires_covariates(self):
        with pytest.raises(DataError):
            CsvSchema("time", "status", ())

    def test_schema_rejects_unknown_categorical(self):
        with pytest.raises(DataError):
            CsvSchema("time", "status", ("z1",), categorical=frozenset({"zz"}))
