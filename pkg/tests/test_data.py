import datetime as dt
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvlong.data import (
    DAYS_PER_YEAR,
    EPOCH,
    CovariateScheme,
    DataError,
    IneligiblePatient,
    LabRoster,
    MissingnessSpec,
    RawLabEvent,
    VariableMissingness,
    align_origin,
    build_covariates,
    cohort_filters,
    load_cohort,
    monthly_bin,
    parse_labs,
    preprocess,
    save_cohort,
    simulate_cohort,
)
from mvlong.model import ModelConfig, random_params

FIXTURES = Path(__file__).parent / "fixtures"


def years(date):
    return (date - EPOCH).days / DAYS_PER_YEAR


def month_mid(y, m):
    start, end = dt.date(y, m, 1), dt.date(y + (m == 12), m % 12 + 1, 1)
    return ((start - EPOCH).days + (end - EPOCH).days) / 2 / DAYS_PER_YEAR


def ev(code, date, value, pid="a"):
    d = dt.date.fromisoformat(date)
    return RawLabEvent(pid, code, years(d), value, d)


# ---- parsing ---------------------------------------------------------------

def test_parse_empty_file(tmp_path):
    (tmp_path / "a.csv").write_text("")
    (tmp_path / "b.csv").write_text("patient_id,lab_code,time,value\n")
    events, report = parse_labs([tmp_path / "a.csv", tmp_path / "b.csv"])
    assert events == []


def test_parse_strict_names_line(tmp_path):
    f = tmp_path / "labs.csv"
    f.write_text("patient_id,lab_code,time,value\na,egfr,1.0,50\na,egfr,2.0,abc\n")
    with pytest.raises(DataError, match=r"labs.csv:3"):
        parse_labs(f)
    events, report = parse_labs(f, strict=False)
    assert len(events) == 1 and report.skipped_rows == 1


def test_parse_unknown_code_counted(tmp_path):
    f = tmp_path / "labs.csv"
    f.write_text("patient_id,lab_code,time,value\na,egfr,1.0,50\na,alb,1.5,4\na,creat,2,1\na,hgb,2,12\n")
    events, report = parse_labs(f)
    assert len(events) == 3
    assert report.dropped_codes == Counter({"hgb": 1})
    assert report.time_modes[str(f)] == "years"


def test_parse_dates_and_bad_header(tmp_path):
    f = tmp_path / "labs.csv"
    f.write_text("patient_id,lab_code,time,value\na,egfr,1970-01-02,50\n")
    events, report = parse_labs(f)
    assert events[0].time == pytest.approx(1 / DAYS_PER_YEAR)
    assert report.time_modes[str(f)] == "date"
    g = tmp_path / "bad.csv"
    g.write_text("id,code,t,v\n")
    with pytest.raises(DataError):
        parse_labs(g)
    h = tmp_path / "mixed.csv"
    h.write_text("patient_id,lab_code,time,value\na,egfr,1970-01-02,50\na,egfr,0.5,50\n")
    with pytest.raises(DataError, match="mixed"):
        parse_labs(h)


def test_parse_nonfinite_value(tmp_path):
    f = tmp_path / "labs.csv"
    f.write_text("patient_id,lab_code,time,value\na,egfr,1.0,nan\n")
    with pytest.raises(DataError):
        parse_labs(f)


# ---- binning ---------------------------------------------------------------

def test_monthly_bin_single_month_mean():
    t, v = monthly_bin([ev("egfr", "2020-03-02", 50.0), ev("egfr", "2020-03-28", 60.0)])
    np.testing.assert_allclose(v, [55.0])
    assert t[0] == pytest.approx(month_mid(2020, 3))


def test_monthly_bin_skips_empty_months():
    t, v = monthly_bin([ev("egfr", "2020-01-10", 1.0), ev("egfr", "2020-04-10", 2.0)])
    assert t.size == 2
    np.testing.assert_allclose(t, [month_mid(2020, 1), month_mid(2020, 4)])


def test_monthly_bin_fixture_hand_oracle():
    events, _ = parse_labs(FIXTURES / "labs.csv")
    alb = [e for e in events if e.patient_id == "p091" and e.lab_code == "alb"]
    assert len(alb) == 14
    t, v = monthly_bin(alb)
    np.testing.assert_allclose(v, [4.0, 3.8, 3.6, 3.35, 3.2])
    expect = [month_mid(2019, 12), month_mid(2020, 1), month_mid(2020, 2), month_mid(2020, 4), month_mid(2020, 6)]
    np.testing.assert_allclose(t, expect)


def test_monthly_bin_fractional_years():
    evs = [RawLabEvent("a", "egfr", t, v) for t, v in [(0.01, 1.0), (0.07, 3.0), (0.5, 5.0), (-0.01, 7.0)]]
    t, v = monthly_bin(evs)
    np.testing.assert_allclose(t, [-0.5 / 12, 0.5 / 12, 6.5 / 12])
    np.testing.assert_allclose(v, [7.0, 2.0, 5.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 10, allow_nan=False), st.floats(-100, 100, allow_nan=False)),
                min_size=0, max_size=30))
def test_monthly_bin_idempotent(pairs):
    evs = [RawLabEvent("a", "x", t, v) for t, v in pairs]
    t1, v1 = monthly_bin(evs)
    t2, v2 = monthly_bin([RawLabEvent("a", "x", t, v) for t, v in zip(t1, v1)])
    np.testing.assert_allclose(t2, t1, atol=1e-12)
    np.testing.assert_allclose(v2, v1, atol=1e-12)
    assert np.all(np.diff(t1) > 0)


# ---- origin ----------------------------------------------------------------

def test_align_origin_examples():
    series = {"egfr": (np.array([0.0, 1.0]), np.array([70.0, 55.0])), "alb": (np.array([0.5, 2.0]), np.array([4.0, 3.0]))}
    shifted, origin = align_origin(series)
    assert origin == 1.0
    np.testing.assert_allclose(shifted["egfr"][0], [-1.0, 0.0])
    np.testing.assert_allclose(shifted["alb"][0], [-0.5, 1.0])
    _, origin = align_origin({"egfr": (np.array([0.3, 1.0]), np.array([50.0, 55.0]))})
    assert origin == 0.3


def test_align_origin_ineligible():
    with pytest.raises(IneligiblePatient):
        align_origin({"egfr": (np.array([0.0]), np.array([61.0]))})
    with pytest.raises(IneligiblePatient):
        align_origin({"alb": (np.array([0.0]), np.array([4.0]))})


# ---- cohort filters --------------------------------------------------------

def _fixture_events():
    events, _ = parse_labs(FIXTURES / "labs.csv")
    by = {}
    for e in events:
        by.setdefault(e.patient_id, []).append(e)
    return by


def test_filters_fixture_boundaries():
    kept, dropped = cohort_filters(_fixture_events())
    assert kept == ["p091"]
    assert dropped == {"p089": "egfr_separation", "p4cr": "creatinine_count"}


def test_filters_fractional_years_boundary():
    creat = [RawLabEvent("a", "creat", 0.1 * k, 1.0) for k in range(5)]
    for days, keep in [(89, False), (90, True), (91, True)]:
        evs = creat + [RawLabEvent("a", "egfr", 1.0, 50.0), RawLabEvent("a", "egfr", 1.0 + days / DAYS_PER_YEAR, 50.0)]
        kept, _ = cohort_filters({"a": evs})
        assert (kept == ["a"]) is keep


def test_filter_monotone_in_creatinine_threshold():
    by = _fixture_events()
    sizes = [len(cohort_filters(by, LabRoster(min_creatinine=k))[0]) for k in range(7, -1, -1)]
    assert sizes == sorted(sizes)
    assert sizes[-1] == 2  # p089 still fails the separation rule


# ---- covariates ------------------------------------------------------------

def test_covariates(tmp_path):
    x, scheme = build_covariates(FIXTURES / "demographics.csv", ["p089", "p091", "p4cr"])
    assert scheme.names == ["intercept", "age_std", "male", "race_black", "race_other", "hypertension", "diabetes"]
    assert x["p089"][0] == 1.0
    np.testing.assert_array_equal(x["p089"][2:], 0.0)  # all reference levels
    assert x["p4cr"][1] == pytest.approx(0.0)  # age equal to the cohort mean
    np.testing.assert_allclose(x["p091"][2:], [1, 1, 0, 1, 0])
    assert all(v.size == scheme.dim for v in x.values())
    # stored statistics are reused for a new cohort
    x2, _ = build_covariates(FIXTURES / "demographics.csv", ["p091"], scheme)
    np.testing.assert_array_equal(x2["p091"], x["p091"])


def test_covariates_missing_patient_listed():
    with pytest.raises(DataError, match="zz1, zz2"):
        build_covariates(FIXTURES / "demographics.csv", ["p089", "zz1", "zz2"])


def test_covariates_bad_flag(tmp_path):
    f = tmp_path / "demo.csv"
    f.write_text("patient_id,age,gender,race,hypertension,diabetes\na,50,F,white,maybe,0\n")
    with pytest.raises(DataError, match="hypertension"):
        build_covariates(f, ["a"], CovariateScheme())


# ---- full pipeline ---------------------------------------------------------

def test_preprocess_fixture(tmp_path):
    ds = preprocess([FIXTURES / "labs.csv"], FIXTURES / "demographics.csv")
    assert [pt.id for pt in ds.patients] == ["p091"]
    pt = ds.patients[0]
    origin = month_mid(2020, 1)
    assert pt.meta["origin"] == pytest.approx(origin)
    egfr = ds.variables.index("egfr")
    np.testing.assert_allclose(pt.values[egfr], [67.0, 53.0, 48.0])
    np.testing.assert_allclose(pt.times[egfr][1], 0.0, atol=1e-12)
    assert pt.times[egfr][0] < 0  # earlier history retained
    assert np.any(pt.times[egfr] >= 0)
    acr = ds.variables.index("acr")
    np.testing.assert_allclose(pt.values[acr], [np.log(15.0)])
    assert ds.provenance["filter_drops"] == {"egfr_separation": 1, "creatinine_count": 1}
    assert ds.provenance["dropped_unknown_codes"] == {"hgb": 1}
    assert ds.time_meta["log_transformed"] == ["acr"]
    # every variable shares the origin shift
    alb = ds.variables.index("alb")
    np.testing.assert_allclose(pt.times[alb][0], month_mid(2019, 12) - origin)

    save_cohort(ds, tmp_path / "cohort")
    back = load_cohort(tmp_path / "cohort")
    assert back.variables == ds.variables
    for a, b in zip(back.patients[0].values, pt.values):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.patients[0].x, pt.x)
    assert (tmp_path / "cohort" / "covariates.csv").read_text().startswith("patient_id,intercept,age_std")


def test_preprocess_without_log():
    ds = preprocess([FIXTURES / "labs.csv"], FIXTURES / "demographics.csv", log_transform=False)
    np.testing.assert_allclose(ds.patients[0].values[ds.variables.index("acr")], [15.0])


# ---- simulation ------------------------------------------------------------

def _sim_params(seed=0):
    cfg = ModelConfig(variables=["a", "b"], n_clusters=2, n_subpops=2, n_covariates=3)
    return random_params(cfg, np.random.default_rng(seed))


def test_simulate_absent_variable_and_determinism():
    params = _sim_params()
    spec = MissingnessSpec([VariableMissingness(0.0, 6.0, (0, 5)), VariableMissingness(1.0, 6.0, (0, 5))])
    a, lat = simulate_cohort(params, 50, spec, np.random.default_rng(3))
    b, _ = simulate_cohort(params, 50, spec, np.random.default_rng(3))
    assert all(pt.times[1].size == 0 for pt in a.patients)
    assert len(lat) == 50
    for u, v in zip(a.patients, b.patients):
        np.testing.assert_array_equal(u.values[0], v.values[0])
        np.testing.assert_array_equal(u.x, v.x)


def test_simulate_count_distribution():
    params = _sim_params(1)
    spec = MissingnessSpec([VariableMissingness(0.3, 5.0, (0, 5)), VariableMissingness(0.0, 2.0, (0, 5))],
                           monthly_grid=False)
    ds, _ = simulate_cohort(params, 4000, spec, np.random.default_rng(4))
    n0 = np.array([pt.times[0].size for pt in ds.patients])
    # absent with prob .3, else 1 + Poisson(4)
    assert abs(np.mean(n0 == 0) - 0.3) < 4 * np.sqrt(0.3 * 0.7 / 4000)
    present = n0[n0 > 0]
    assert abs(present.mean() - 5.0) < 4 * 2.0 / np.sqrt(present.size)
    n1 = np.array([pt.times[1].size for pt in ds.patients])
    assert n1.min() >= 1
    assert abs(n1.mean() - 2.0) < 4 / np.sqrt(4000)
