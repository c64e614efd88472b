"""Cross-validated forecasting benchmark against per-lab univariate models.

Averaging order: per-patient MAE within a (lab, bin) cell, then the
unweighted mean over test patients with at least one target in the cell,
then the mean over folds. Significance uses one-sided paired t-tests on the
per-patient cell MAEs pooled over folds.
"""
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from mvlong.inference import FitOptions, fit
from mvlong.model import PatientRecord
from mvlong.prediction import ForecastRequest, fit_heldout_local, predictive_draws
from mvlong.utils import parallel_map, rng_for

log = logging.getLogger(__name__)

PROPOSED = "Proposed"
BASELINE = "Univariate"


@dataclass
class EvalProtocol:
    n_folds: int = 10
    truncations: tuple = (1.0, 2.0, 4.0)
    bins: tuple = ((1.0, 2.0), (2.0, 4.0), (4.0, 8.0), (8.0, 19.0))
    levels: tuple = (0.05, 0.01, 0.001, 0.0001)
    seed: int = 0
    n_samples: int = 1000
    holdout_fraction: float = 0.2
    baseline_clusters: int = None
    folds_to_run: int = None

    def __post_init__(self):
        self.truncations = tuple(float(t) for t in self.truncations)
        self.bins = tuple((float(lo), float(hi)) for lo, hi in self.bins)
        self.levels = tuple(sorted(float(a) for a in self.levels))[::-1]
        if self.n_folds < 1:
            raise ValueError("n_folds must be >= 1")
        if any(t <= 0 for t in self.truncations):
            raise ValueError("truncation times must be positive")
        for (lo, hi), (lo2, _) in zip(self.bins, self.bins[1:]):
            if not lo < hi <= lo2:
                raise ValueError("bins must be ascending and disjoint")
        if self.bins and not self.bins[-1][0] < self.bins[-1][1]:
            raise ValueError("bins must have positive width")

    def populated_bins(self, t_trunc):
        return [k for k, (lo, _) in enumerate(self.bins) if lo >= t_trunc]

    def to_dict(self):
        return asdict(self)


def bin_label(b):
    lo, hi = b
    return f"({lo:g},{hi:g}]"


def kfold_split(n, k, seed=0, holdout_fraction=0.2):
    """``k`` disjoint near-equal test folds; ``k == 1`` means a single random holdout."""
    if k == 1:
        perm = rng_for(seed, "kfold").permutation(n)
        n_test = max(1, int(round(holdout_fraction * n)))
        if n_test >= n:
            raise ValueError("holdout split needs at least two patients")
        return [(np.sort(perm[n_test:]), np.sort(perm[:n_test]))]
    if n < k:
        raise ValueError(f"cannot split {n} patients into {k} folds")
    perm = rng_for(seed, "kfold").permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        test = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, test))
    return out


def truncate_history(patient, t_trunc, bins=EvalProtocol.bins):
    """Split observations at ``t_trunc`` (inclusive history).

    Returns ``(history, targets)``; ``targets[p]`` is ``(times, values, bin_index)``
    for observations after ``t_trunc`` with ``bin_index`` -1 outside every bin.
    """
    if not t_trunc > 0:
        raise ValueError("truncation time must be positive")
    h_times, h_vals, targets = [], [], []
    for t, v in zip(patient.times, patient.values):
        keep = t <= t_trunc
        h_times.append(t[keep])
        h_vals.append(v[keep])
        tt, vv = t[~keep], v[~keep]
        idx = np.full(tt.size, -1)
        for k, (lo, hi) in enumerate(bins):
            idx[(tt > lo) & (tt <= hi)] = k
        targets.append((tt, vv, idx))
    history = PatientRecord(patient.id, patient.x, h_times, h_vals, dict(patient.meta))
    return history, targets


def mae_by_bin(predictions, targets, allowed_bins=None):
    """Per-(variable, bin) mean absolute error for one patient.

    ``predictions[p]`` are point forecasts at ``targets[p]`` times. Cells with
    no target are absent from the result.
    """
    out = {}
    for p, ((_, values, idx), pred) in enumerate(zip(targets, predictions)):
        err = np.abs(np.asarray(pred) - values)
        for k in np.unique(idx):
            if k < 0 or (allowed_bins is not None and k not in allowed_bins):
                continue
            out[(p, int(k))] = float(err[idx == k].mean())
    return out


def paired_ttest_one_sided(errors_a, errors_b):
    """One-sided paired t-test of ``mean(a - b) < 0``.

    Returns ``(t, p)``. All-zero differences give ``(0, 0.5)``; fewer than two
    pairs give ``(nan, nan)`` (not testable).
    """
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        return math.nan, math.nan
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 0.5
        return (-math.inf, 0.0) if mean < 0 else (math.inf, 1.0)
    t = mean / (sd / math.sqrt(n))
    return float(t), float(stats.t.cdf(t, df=n - 1))


def significance_stars(p, levels=EvalProtocol().levels):
    """Stars for each level below the loosest one that ``p`` passes ('*' .. '***').

    The loosest level (.05 by default) is shown as bold, see ``is_bold``.
    """
    if p is None or not np.isfinite(p):
        return "n/a"
    return "*" * sum(p < a for a in levels[1:])


def is_bold(p, levels=EvalProtocol().levels):
    return p is not None and bool(np.isfinite(p)) and p < levels[0]


# --------------------------------------------------------------------------
# Training both arms
# --------------------------------------------------------------------------

def univariate_baseline(dataset, config, options=None, seed=0, n_clusters=None, stream=()):
    """One P=1 model per variable, fitted with the same inference code."""
    patients = list(getattr(dataset, "patients", dataset))
    models = []
    for p in range(config.P):
        sub_cfg = config.subset([p], n_clusters=n_clusters or config.n_subpops[p])
        sub_pts = [pt.select([p]) for pt in patients]
        rng = rng_for(seed, *stream, "baseline", p)
        models.append(fit(sub_pts, sub_cfg, options, rng=rng).params)
    return models


def _forecast_means(params, history, target_times, n_samples, rng, options):
    local = fit_heldout_local(params, history, options)
    request = ForecastRequest(history, target_times, n_samples)
    return predictive_draws(params, local, request, rng=rng).mean


@dataclass
class _FoldJob:
    fold: int
    train: np.ndarray
    test: np.ndarray
    patients: list
    config: object
    options: object
    protocol: EvalProtocol
    models: tuple = None


def run_fold(job):
    """Train both arms on one fold and score every test patient at every truncation."""
    proto, options, cfg = job.protocol, job.options, job.config
    train = [job.patients[i] for i in job.train]
    if job.models is None:
        mv = fit(train, cfg, options, rng=rng_for(proto.seed, "fold", job.fold, "proposed")).params
        base = univariate_baseline(train, cfg, options, seed=proto.seed, n_clusters=proto.baseline_clusters,
                                   stream=("fold", job.fold))
    else:
        mv, base = job.models
    records = []
    for t_trunc in proto.truncations:
        allowed = proto.populated_bins(t_trunc)
        for i in job.test:
            pt = job.patients[i]
            history, targets = truncate_history(pt, t_trunc, proto.bins)
            masks = [np.isin(idx, allowed) for _, _, idx in targets]
            if not any(m.any() for m in masks):
                continue
            targets = [(t[m], v[m], idx[m]) for (t, v, idx), m in zip(targets, masks)]
            target_times = [t for t, _, _ in targets]
            rng = rng_for(proto.seed, "predict", job.fold, t_trunc, pt.id)
            mv_pred = _forecast_means(mv, history, target_times, proto.n_samples, rng, options)
            base_pred = []
            for p in range(cfg.P):
                if target_times[p].size == 0:
                    base_pred.append(np.zeros(0))
                    continue
                sub = history.select([p])
                rng_p = rng_for(proto.seed, "predict-baseline", job.fold, t_trunc, pt.id, p)
                base_pred.append(_forecast_means(base[p], sub, [target_times[p]], proto.n_samples,
                                                 rng_p, options)[0])
            mv_err = mae_by_bin(mv_pred, targets, allowed)
            base_err = mae_by_bin(base_pred, targets, allowed)
            for (p, k), e in mv_err.items():
                records.append((job.fold, pt.id, t_trunc, p, k, e, base_err[(p, k)]))
    return records


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    variables: tuple
    protocol: EvalProtocol
    rows: list = field(default_factory=list)
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def cell(self, variable, model, truncation, bin_index):
        for r in self.rows:
            if (r["lab"] == variable and r["model"] == model and r["truncation"] == truncation
                    and r["bin_index"] == bin_index):
                return r
        return None

    def to_csv(self, path):
        cols = ["lab", "model", "truncation", "bin", "mae_mean", "mae_sd_over_folds", "p_value", "stars"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["lab"], r["model"], f"{r['truncation']:g}", r["bin"], repr(r["mae_mean"]),
                            repr(r["mae_sd_over_folds"]), repr(r["p_value"]), r["stars"]])

    def render_table(self, names=None):
        """Fixed-width text table: one column per (truncation, bin) cell, two rows per lab."""
        names = names or {}
        proto = self.protocol
        cols = [(t, k) for t in proto.truncations for k in proto.populated_bins(t)]
        head1 = f"{'':16s}{'':12s}" + "".join(f"{('t=' + format(t, 'g')):>12s}" for t, _ in cols)
        head2 = f"{'Lab':16s}{'Model':12s}" + "".join(f"{bin_label(proto.bins[k]):>12s}" for _, k in cols)
        lines = [head1, head2, "-" * len(head2)]
        for var in self.variables:
            for model in (BASELINE, PROPOSED):
                label = names.get(var, var) if model == BASELINE else ""
                cells = []
                for t, k in cols:
                    r = self.cell(var, model, t, k)
                    if r is None:
                        cells.append(f"{'':>12s}")
                        continue
                    text = format(r["mae_mean"], ".2f")
                    if is_bold(r["p_value"], proto.levels):
                        text = f"[{text}]"
                    if r["stars"] != "n/a":
                        text += r["stars"]
                    cells.append(f"{text:>12s}")
                lines.append(f"{label:16s}{model:12s}" + "".join(cells))
            lines.append("-" * len(head2))
        lv = ", ".join(format(a, "g") for a in proto.levels[1:])
        lines.append(f"[x]: one-sided paired p < {proto.levels[0]:g} that this model is better; "
                     f"stars: p < {lv}")
        return "\n".join(lines) + "\n"

    def write(self, directory, names=None):
        import os
        os.makedirs(directory, exist_ok=True)
        self.to_csv(os.path.join(directory, "report.csv"))
        with open(os.path.join(directory, "report_table.txt"), "w") as fh:
            fh.write(self.render_table(names))
        with open(os.path.join(directory, "per_patient_errors.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "patient_id", "truncation", "lab", "bin", "mae_proposed", "mae_baseline"])
            for fold, pid, t, p, k, a, b in self.records:
                w.writerow([fold, pid, f"{t:g}", self.variables[p], bin_label(self.protocol.bins[k]),
                            repr(a), repr(b)])


def assemble_report(records, variables, protocol, meta=None):
    proto = protocol
    folds = sorted({r[0] for r in records})
    rows = []
    for p, var in enumerate(variables):
        for t in proto.truncations:
            for k in proto.populated_bins(t):
                cell = [r for r in records if r[2] == t and r[3] == p and r[4] == k]
                if not cell:
                    continue
                mv = np.array([r[5] for r in cell])
                base = np.array([r[6] for r in cell])
                _, p_mv = paired_ttest_one_sided(mv, base)
                p_base = 1.0 - p_mv if np.isfinite(p_mv) else math.nan
                for model, errs, pval, col in ((BASELINE, base, p_base, 6), (PROPOSED, mv, p_mv, 5)):
                    per_fold = [float(np.mean([r[col] for r in cell if r[0] == f]))
                                for f in folds if any(r[0] == f for r in cell)]
                    rows.append({
                        "lab": var,
                        "model": model,
                        "truncation": t,
                        "bin_index": k,
                        "bin": bin_label(proto.bins[k]),
                        "mae_mean": float(np.mean(per_fold)),
                        "mae_sd_over_folds": float(np.std(per_fold, ddof=1)) if len(per_fold) > 1 else 0.0,
                        "per_fold": per_fold,
                        "p_value": float(pval),
                        "stars": significance_stars(pval, proto.levels),
                        "n_patients": int(errs.size),
                    })
    return EvaluationReport(tuple(variables), proto, rows, list(records), meta or {})


def config_hash(*objs):
    blob = json.dumps([o if isinstance(o, dict) else asdict(o) if hasattr(o, "__dataclass_fields__")
                       else o.to_dict() for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_benchmark(dataset, config, protocol=None, options=None, workers=1):
    """Cross-validated comparison of the multivariate model and per-lab baselines."""
    protocol = protocol or EvalProtocol()
    options = options or FitOptions()
    patients = list(getattr(dataset, "patients", dataset))
    splits = kfold_split(len(patients), protocol.n_folds, protocol.seed, protocol.holdout_fraction)
    if protocol.folds_to_run is not None:
        splits = splits[:protocol.folds_to_run]
    jobs = [_FoldJob(i, tr, te, patients, config, options, protocol) for i, (tr, te) in enumerate(splits)]
    results = []
    for i, recs in enumerate(parallel_map(_run_fold_safe, jobs, workers)):
        if isinstance(recs, Exception):
            raise RuntimeError(f"fold {i} failed: {recs}") from recs
        results.extend(recs)
    meta = {"config_hash": config_hash(config, protocol, options), "seed": protocol.seed,
            "n_patients": len(patients), "n_folds_run": len(splits)}
    return assemble_report(results, config.variables, protocol, meta)


def _run_fold_safe(job):
    try:
        return run_fold(job)
    except Exception as exc:  # surfaced with the fold index by the caller
        log.exception("fold %d failed", job.fold)
        return exc
