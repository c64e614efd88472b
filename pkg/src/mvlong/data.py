"""Lab-data ingestion, cohort construction and synthetic cohorts.

Input conventions
-----------------
labs CSV         ``patient_id,lab_code,time,value``; ``time`` is either an
                 ISO-8601 date or fractional years, detected per file.
demographics CSV ``patient_id,age,gender,race,hypertension,diabetes``.

Internally every time is in years. ISO dates map to days since 1970-01-01
divided by 365.25.
"""
import csv
import datetime as dt
import hashlib
import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from mvlong.model import PatientRecord, sample_patient

DAYS_PER_YEAR = 365.25
EPOCH = dt.date(1970, 1, 1)
TIME_EPS = 1e-9


class DataError(ValueError):
    pass


class IneligiblePatient(DataError):
    pass


@dataclass
class LabRoster:
    """Modeled lab codes in model order, plus the codes the cohort rules use."""

    variables: tuple = ("egfr", "alb", "bicarb", "ca", "phos", "acr")
    names: tuple = ("eGFR", "Serum Alb.", "Serum Bicarb.", "Serum Calc.", "Serum Phos.", "Urine ACR")
    egfr_code: str = "egfr"
    creatinine_code: str = "creat"
    log_codes: tuple = ("acr",)
    egfr_threshold: float = 60.0
    min_creatinine: int = 5
    min_separation_days: float = 90.0

    @property
    def codes(self):
        return set(self.variables) | {self.creatinine_code}

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class RawLabEvent:
    patient_id: str
    lab_code: str
    time: float
    value: float
    date: dt.date = None


@dataclass
class ParseReport:
    dropped_codes: Counter = field(default_factory=Counter)
    skipped_rows: int = 0
    time_modes: dict = field(default_factory=dict)


@dataclass
class CohortDataset:
    patients: list
    variables: tuple
    time_meta: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.patients)

    def subset(self, indices):
        return CohortDataset([self.patients[i] for i in indices], self.variables,
                             dict(self.time_meta), dict(self.provenance))


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

def _parse_time_column(rows, path):
    """``rows`` are ``(lineno, raw_time)`` pairs from one file."""
    try:
        return [float(t) for _, t in rows], [None] * len(rows), "years"
    except ValueError:
        pass
    dates = []
    for lineno, t in rows:
        try:
            dates.append(dt.date.fromisoformat(t.strip()[:10]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: time {t!r} is neither fractional years nor an ISO date "
                            "(mixed time formats in one file are not supported)") from exc
    return [(d - EPOCH).days / DAYS_PER_YEAR for d in dates], dates, "date"


def parse_labs(files, roster=None, strict=True):
    """Read lab CSV files into validated events.

    Unknown lab codes are dropped and counted. Malformed rows raise a
    ``DataError`` naming the line in strict mode and are skipped (counted) otherwise.
    Returns ``(events, report)``.
    """
    roster = roster or LabRoster()
    if isinstance(files, (str, os.PathLike)):
        files = [files]
    events, report = [], ParseReport()
    for path in files:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                report.time_modes[str(path)] = None
                continue
            header = [h.strip() for h in header]
            need = ["patient_id", "lab_code", "time", "value"]
            if any(h not in header for h in need):
                raise DataError(f"{path}: header must contain {','.join(need)}")
            col = {h: header.index(h) for h in need}
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    pid = row[col["patient_id"]].strip()
                    code = row[col["lab_code"]].strip()
                    tval = row[col["time"]].strip()
                    value = float(row[col["value"]])
                    if not pid or not tval or not math.isfinite(value):
                        raise ValueError("empty field or non-finite value")
                except (IndexError, ValueError) as exc:
                    if strict:
                        raise DataError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from exc
                    report.skipped_rows += 1
                    continue
                rows.append((lineno, pid, code, tval, value))
        if not rows:
            report.time_modes[str(path)] = None
            continue
        times, dates, mode = _parse_time_column([(r[0], r[3]) for r in rows], path)
        report.time_modes[str(path)] = mode
        for (lineno, pid, code, _, value), t, d in zip(rows, times, dates):
            if code not in roster.codes:
                report.dropped_codes[code] += 1
                continue
            events.append(RawLabEvent(pid, code, t, value, d))
    return events, report


# --------------------------------------------------------------------------
# Per-patient preprocessing
# --------------------------------------------------------------------------

def _month_key_and_mid(event):
    if event.date is not None:
        y, m = event.date.year, event.date.month
        start = dt.date(y, m, 1)
        end = dt.date(y + (m == 12), m % 12 + 1, 1)
        mid_days = ((start - EPOCH).days + (end - EPOCH).days) / 2.0
        return (y, m), mid_days / DAYS_PER_YEAR
    k = math.floor(event.time * 12.0 + TIME_EPS)
    return k, (k + 0.5) / 12.0


def monthly_bin(events):
    """Average values within calendar months (dates) or 1/12-year bins (fractional years).

    Returns ``(times, values)`` with one point per non-empty bin at the bin midpoint.
    """
    groups = defaultdict(list)
    mids = {}
    for ev in events:
        key, mid = _month_key_and_mid(ev)
        groups[key].append(ev.value)
        mids[key] = mid
    keys = sorted(groups, key=lambda k: mids[k])
    times = np.array([mids[k] for k in keys], dtype=float)
    values = np.array([float(np.mean(groups[k])) for k in keys], dtype=float)
    return times, values


def align_origin(series, roster=None):
    """Shift all variables so t=0 is the first binned eGFR value below threshold.

    ``series`` maps lab code to ``(times, values)``. Earlier observations are
    kept with negative times. Raises ``IneligiblePatient`` when no bin qualifies.
    """
    roster = roster or LabRoster()
    t_e, v_e = series.get(roster.egfr_code, (np.zeros(0), np.zeros(0)))
    below = np.flatnonzero(np.asarray(v_e) < roster.egfr_threshold)
    if below.size == 0:
        raise IneligiblePatient("no eGFR bin below threshold")
    origin = float(np.asarray(t_e)[below[0]])
    shifted = {code: (np.asarray(t) - origin, np.asarray(v)) for code, (t, v) in series.items()}
    return shifted, origin


def _separation_ok(events, roster):
    low = [ev for ev in events if ev.value < roster.egfr_threshold]
    if len(low) < 2:
        return False
    if all(ev.date is not None for ev in low):
        days = [(ev.date - EPOCH).days for ev in low]
        return max(days) - min(days) >= roster.min_separation_days
    span = max(ev.time for ev in low) - min(ev.time for ev in low)
    return span >= roster.min_separation_days / DAYS_PER_YEAR - TIME_EPS


def cohort_filters(patient_events, roster=None):
    """Apply the cohort rules to raw (unbinned) events.

    ``patient_events`` maps patient id to its list of events. A patient is
    kept with at least ``min_creatinine`` creatinine values and two eGFR
    values below threshold at least ``min_separation_days`` apart.
    Returns ``(kept_ids, dropped)`` with ``dropped`` mapping id to reason.
    """
    roster = roster or LabRoster()
    kept, dropped = [], {}
    for pid in sorted(patient_events):
        evs = patient_events[pid]
        n_creat = sum(ev.lab_code == roster.creatinine_code for ev in evs)
        if n_creat < roster.min_creatinine:
            dropped[pid] = "creatinine_count"
            continue
        if not _separation_ok([ev for ev in evs if ev.lab_code == roster.egfr_code], roster):
            dropped[pid] = "egfr_separation"
            continue
        kept.append(pid)
    return kept, dropped


# --------------------------------------------------------------------------
# Covariates
# --------------------------------------------------------------------------

@dataclass
class CovariateScheme:
    """Dummy coding: reference gender and race levels map to all-zero indicators."""

    gender_reference: str = "F"
    race_levels: tuple = ("white", "black", "other")
    age_mean: float = None
    age_sd: float = None

    @property
    def names(self):
        races = [f"race_{r}" for r in self.race_levels[1:]]
        return ["intercept", "age_std", "male", *races, "hypertension", "diabetes"]

    @property
    def dim(self):
        return len(self.names)


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


def _flag(text, pid, column):
    s = str(text).strip().lower()
    if s in _TRUE:
        return 1.0
    if s in _FALSE:
        return 0.0
    raise DataError(f"patient {pid}: cannot read {column} value {text!r} as a 0/1 flag")


def build_covariates(demographics, patient_ids, scheme=None):
    """Covariate vectors ``x_i`` in the order given by ``scheme.names``.

    Age is standardized with the scheme's stored mean/SD, or with statistics
    over ``patient_ids`` when the scheme has none (the fitted values are
    written back to the scheme). Returns ``(covariates, scheme)``.
    """
    scheme = scheme or CovariateScheme()
    rows = {}
    with open(demographics, newline="") as fh:
        for row in csv.DictReader(fh):
            rows[row["patient_id"].strip()] = row
    missing = [pid for pid in patient_ids if pid not in rows]
    if missing:
        raise DataError(f"demographics missing for patient(s): {', '.join(missing)}")
    ages = np.array([float(rows[pid]["age"]) for pid in patient_ids])
    if scheme.age_mean is None:
        scheme.age_mean = float(ages.mean()) if ages.size else 0.0
        sd = float(ages.std()) if ages.size > 1 else 1.0
        scheme.age_sd = sd if sd > 0 else 1.0
    out = {}
    for pid, age in zip(patient_ids, ages):
        row = rows[pid]
        race = row["race"].strip().lower()
        if race not in scheme.race_levels:
            race = scheme.race_levels[-1]
        race_ind = [float(race == r) for r in scheme.race_levels[1:]]
        out[pid] = np.array([
            1.0,
            (age - scheme.age_mean) / scheme.age_sd,
            float(row["gender"].strip().upper()[:1] != scheme.gender_reference.upper()[:1]),
            *race_ind,
            _flag(row["hypertension"], pid, "hypertension"),
            _flag(row["diabetes"], pid, "diabetes"),
        ])
    return out, scheme


# --------------------------------------------------------------------------
# Full pipeline and archive
# --------------------------------------------------------------------------

def preprocess(lab_files, demographics, roster=None, strict=True, log_transform=True, scheme=None):
    """Parse, filter, bin, align and assemble a ``CohortDataset``."""
    roster = roster or LabRoster()
    events, report = parse_labs(lab_files, roster, strict)
    by_patient = defaultdict(list)
    for ev in events:
        by_patient[ev.patient_id].append(ev)
    kept, dropped = cohort_filters(by_patient, roster)
    nonpositive = Counter()
    patients = []
    covariates, scheme = build_covariates(demographics, kept, scheme)
    for pid in kept:
        per_code = defaultdict(list)
        for ev in sorted(by_patient[pid], key=lambda e: e.time):
            per_code[ev.lab_code].append(ev)
        series = {code: monthly_bin(evs) for code, evs in per_code.items() if code in roster.variables}
        try:
            shifted, origin = align_origin(series, roster)
        except IneligiblePatient:
            dropped[pid] = "no_egfr_bin_below_threshold"
            continue
        times, values = [], []
        for code in roster.variables:
            t, v = shifted.get(code, (np.zeros(0), np.zeros(0)))
            if log_transform and code in roster.log_codes:
                ok = v > 0
                nonpositive[code] += int((~ok).sum())
                t, v = t[ok], np.log(v[ok])
            times.append(t)
            values.append(v)
        patients.append(PatientRecord(pid, covariates[pid], times, values, {"origin": origin}))
    provenance = {
        "source_files": [str(f) for f in ([lab_files] if isinstance(lab_files, (str, os.PathLike)) else lab_files)],
        "demographics": str(demographics),
        "dropped_unknown_codes": dict(report.dropped_codes),
        "skipped_rows": report.skipped_rows,
        "time_modes": report.time_modes,
        "filter_drops": dict(Counter(dropped.values())),
        "dropped_patients": dropped,
        "nonpositive_log_values": dict(nonpositive),
        "n_kept": len(patients),
    }
    time_meta = {
        "origin_rule": f"first monthly {roster.egfr_code} bin below {roster.egfr_threshold}",
        "bin_width": "calendar month (dates) or 1/12 year (fractional years)",
        "units": "years",
        "log_transformed": list(roster.log_codes) if log_transform else [],
        "roster": roster.to_dict(),
        "covariates": {"names": scheme.names, "age_mean": scheme.age_mean, "age_sd": scheme.age_sd,
                       "gender_reference": scheme.gender_reference,
                       "race_levels": list(scheme.race_levels)},
    }
    return CohortDataset(patients, tuple(roster.variables), time_meta, provenance)


def save_cohort(dataset, directory, extra=None):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "patients.jsonl"), "w") as fh:
        for pt in dataset.patients:
            fh.write(json.dumps(pt.to_dict(), sort_keys=True) + "\n")
    names = dataset.time_meta.get("covariates", {}).get("names")
    q = dataset.patients[0].x.size if dataset.patients else 0
    names = names or [f"x{j}" for j in range(q)]
    with open(os.path.join(directory, "covariates.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", *names])
        for pt in dataset.patients:
            w.writerow([pt.id, *[repr(float(v)) for v in pt.x]])
    manifest = {
        "variables": list(dataset.variables),
        "n_patients": len(dataset.patients),
        "time_meta": dataset.time_meta,
        "provenance": dataset.provenance,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def load_cohort(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    patients = []
    with open(os.path.join(directory, "patients.jsonl")) as fh:
        for line in fh:
            if line.strip():
                patients.append(PatientRecord.from_dict(json.loads(line)))
    return CohortDataset(patients, tuple(manifest["variables"]), manifest.get("time_meta", {}),
                         manifest.get("provenance", {}))


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Synthetic cohorts
# --------------------------------------------------------------------------

@dataclass
class VariableMissingness:
    """Observation process for one variable.

    A patient has no values with probability ``p_absent``; otherwise the count
    is ``1 + Poisson(mean_count - 1)`` and times are uniform on ``t_range``.
    """

    p_absent: float = 0.0
    mean_count: float = 8.0
    t_range: tuple = (-1.0, 10.0)


@dataclass
class MissingnessSpec:
    variables: list
    monthly_grid: bool = True


def draw_observation_times(spec, rng):
    out = []
    for vm in spec.variables:
        if rng.random() < vm.p_absent or vm.mean_count <= 0:
            out.append(np.zeros(0))
            continue
        n = 1 + rng.poisson(max(vm.mean_count - 1.0, 0.0))
        t = rng.uniform(vm.t_range[0], vm.t_range[1], size=n)
        if spec.monthly_grid:
            t = np.unique((np.floor(t * 12.0) + 0.5) / 12.0)
        out.append(np.sort(t))
    return out


def simulate_covariates(q, rng):
    """Intercept first. ``q == 7`` follows the CKD covariate layout; other sizes use Gaussians."""
    if q == 7:
        race = rng.choice(3, p=[0.6, 0.3, 0.1])
        return np.array([1.0, rng.standard_normal(), float(rng.random() < 0.45),
                         float(race == 1), float(race == 2),
                         float(rng.random() < 0.7), float(rng.random() < 0.4)])
    return np.concatenate([[1.0], rng.standard_normal(q - 1)])


def simulate_cohort(params, n, missingness, rng, id_prefix="sim"):
    """Draw ``n`` patients from the model; returns ``(dataset, latents)``."""
    if len(missingness.variables) != params.config.P:
        raise ValueError("missingness spec needs one entry per model variable")
    patients, latents = [], []
    width = len(str(max(n - 1, 1)))
    for i in range(n):
        x = simulate_covariates(params.config.n_covariates, rng)
        times = draw_observation_times(missingness, rng)
        rec, lat = sample_patient(params, x, times, rng, patient_id=f"{id_prefix}{i:0{width}d}")
        patients.append(rec)
        latents.append(lat)
    time_meta = {"origin_rule": "synthetic", "units": "years",
                 "bin_width": "1/12 year" if missingness.monthly_grid else "none"}
    provenance = {"source": "simulate_cohort", "n": n}
    return CohortDataset(patients, params.config.variables, time_meta, provenance), latents
