"""Command-line entry point: simulate, preprocess, fit, predict, evaluate, gradcheck.

Configuration comes from one TOML file with optional sections ``[model]``,
``[fit]``, ``[protocol]`` and ``[simulate]``; command-line flags override
the file. Every output directory receives ``manifest.json`` with the
resolved configuration, its hash and the root seed.
"""
import argparse
import csv
import dataclasses
import functools
import hashlib
import json
import logging
import os
import sys

import numpy as np

from mvlong import __version__

log = logging.getLogger("mvlong")

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(directory, command, resolved, seed, inputs=None):
    """Manifest with the resolved config, its hash and the seed (no timestamps, so reruns match)."""
    os.makedirs(directory, exist_ok=True)
    from mvlong.data import file_digest
    digests = {}
    for name, path in (inputs or {}).items():
        if path and os.path.isfile(path):
            digests[name] = file_digest(path)
    doc = {
        "command": command,
        "package_version": __version__,
        "seed": seed,
        "config": resolved,
        "config_hash": _hash(resolved),
        "inputs": digests,
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return doc


def _model_config(section, dataset=None):
    from mvlong.model import ModelConfig
    section = dict(section)
    if dataset is not None:
        section.setdefault("variables", list(dataset.variables))
        if dataset.patients:
            section.setdefault("n_covariates", int(dataset.patients[0].x.size))
        names = dataset.time_meta.get("covariates", {}).get("names")
        if names:
            section.setdefault("covariate_names", list(names))
    if "variables" not in section:
        raise UsageError("model variables are not given in the config and cannot be inferred")
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown [model] keys: {sorted(unknown)}")
    return ModelConfig(**section)


def _dataclass_from(cls, section, overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**merged)


def _fit_options(cfg, args, seed):
    from mvlong.inference import FitOptions
    over = {"batch_size": getattr(args, "batch", None), "max_epochs": getattr(args, "epochs", None),
            "seed": seed}
    return _dataclass_from(FitOptions, cfg.get("fit", {}), over)


def _seed(args, cfg):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    raise UsageError("a seed is required (--seed or 'seed' in the config)")


def _workers(args):
    w = getattr(args, "workers", None)
    return int(w) if w is not None else (os.cpu_count() or 1)


def _asdict(obj):
    return dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args):
    from mvlong.data import MissingnessSpec, VariableMissingness, save_cohort, simulate_cohort
    from mvlong.model import load_snapshot, random_params, save_snapshot
    from mvlong.utils import rng_for

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    sim = dict(cfg.get("simulate", {}))
    n = args.n if args.n is not None else sim.pop("n", 500)
    sim.pop("n", None)
    miss = sim.pop("missingness", None)
    truth = sim.pop("truth_snapshot", None)
    monthly = sim.pop("monthly_grid", True)
    if truth:
        params, _ = load_snapshot(truth)
    else:
        config = _model_config(cfg.get("model", {}))
        sim_kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in sim.items()}
        try:
            params = random_params(config, rng_for(seed, "simulate", "params"), **sim_kwargs)
        except TypeError as exc:
            raise UsageError(f"bad [simulate] keys: {exc}") from exc
    P = params.config.P
    if miss is None:
        miss = [{}] * P
    if len(miss) != P:
        raise UsageError(f"[simulate] missingness needs {P} entries, got {len(miss)}")
    spec = MissingnessSpec([VariableMissingness(**{k: (tuple(v) if isinstance(v, list) else v)
                                                   for k, v in m.items()}) for m in miss], monthly)
    dataset, latents = simulate_cohort(params, int(n), spec, rng_for(seed, "simulate", "cohort"))
    resolved = {"n": int(n), "simulate": cfg.get("simulate", {}), "model": params.config.to_dict()}
    save_cohort(dataset, args.out, {"command": "simulate", "config": resolved,
                                    "config_hash": _hash(resolved), "seed": seed})
    save_snapshot(params, os.path.join(args.out, "truth_snapshot.json"), {"source": "simulate"})
    with open(os.path.join(args.out, "latents.jsonl"), "w") as fh:
        for pt, lat in zip(dataset.patients, latents):
            fh.write(json.dumps({"id": pt.id, **lat.to_dict()}, sort_keys=True) + "\n")
    print(f"simulated {len(dataset)} patients -> {args.out}")
    return 0


def cmd_preprocess(args):
    from mvlong.data import LabRoster, preprocess, save_cohort
    for f in [*args.labs, args.demographics]:
        if not os.path.exists(f):
            raise UsageError(f"input file not found: {f}")
    roster = LabRoster()
    dataset = preprocess(args.labs, args.demographics, roster, strict=args.strict, log_transform=args.log_acr)
    resolved = {"strict": args.strict, "log_acr": args.log_acr, "roster": roster.to_dict()}
    h = _hash(resolved)
    save_cohort(dataset, args.out, {"config_hash": h, "seed": None, "command": "preprocess"})
    drops = dataset.provenance.get("filter_drops", {})
    print(f"kept {len(dataset)} patients; dropped {sum(drops.values())} {drops} -> {args.out}")
    return 0


def cmd_fit(args):
    from mvlong.data import load_cohort
    from mvlong.inference import fit
    from mvlong.model import save_snapshot
    from mvlong.utils import rng_for

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    dataset = load_cohort(args.cohort)
    config = _model_config(cfg.get("model", {}), dataset)
    options = _fit_options(cfg, args, seed)
    os.makedirs(args.out, exist_ok=True)
    if args.checkpoint_every:
        options.checkpoint_every = args.checkpoint_every
        options.checkpoint_dir = args.out
    result = fit(dataset, config, options, rng=rng_for(seed, "fit"),
                 trace_path=os.path.join(args.out, "trace.csv"))
    resolved = {"model": config.to_dict(), "fit": _asdict(options), "cohort": os.path.abspath(args.cohort)}
    resolved["fit"].pop("workers", None)
    resolved["fit"].pop("checkpoint_dir", None)
    doc = write_manifest(args.out, "fit", resolved, seed,
                         {"patients": os.path.join(args.cohort, "patients.jsonl"), "config": args.config})
    save_snapshot(result.params, os.path.join(args.out, "snapshot.json"),
                  {"config_hash": doc["config_hash"], "seed": seed, "epochs": len(result.trace),
                   "covariates": dataset.time_meta.get("covariates"),
                   "log_transformed": dataset.time_meta.get("log_transformed", [])})
    with open(os.path.join(args.out, "locals.jsonl"), "w") as fh:
        for pt, lv in zip(dataset.patients, result.locals):
            fh.write(json.dumps({"id": pt.id, **lv.to_dict()}, sort_keys=True) + "\n")
    last = result.trace[-1] if result.trace else None
    if last:
        print(f"fit finished after {last[0]} epochs; final bound {last[2]:.6f} -> {args.out}")
    return 0


def _parse_bins(items):
    bins = []
    for item in items:
        try:
            lo, hi = (float(v) for v in item.split(","))
        except ValueError as exc:
            raise UsageError(f"bad bin {item!r}; expected LO,HI") from exc
        bins.append((lo, hi))
    return tuple(bins)


def _predict_one(patient, params, t_trunc, bins, n_samples, seed, options):
    from mvlong.evaluation import mae_by_bin, truncate_history
    from mvlong.prediction import ForecastRequest, fit_heldout_local, predictive_draws
    from mvlong.utils import rng_for

    history, targets = truncate_history(patient, t_trunc, bins)
    targets = [(t[i >= 0], v[i >= 0], i[i >= 0]) for t, v, i in targets]
    if not any(t.size for t, _, _ in targets):
        return None, {}
    local = fit_heldout_local(params, history, options)
    request = ForecastRequest(history, [t for t, _, _ in targets], n_samples, truncation_time=t_trunc)
    fc = predictive_draws(params, local, request, rng=rng_for(seed, "predict", patient.id))
    return fc, mae_by_bin(fc.mean, targets)


def cmd_predict(args):
    from mvlong.data import load_cohort
    from mvlong.evaluation import EvalProtocol, bin_label
    from mvlong.inference import FitOptions
    from mvlong.model import load_snapshot
    from mvlong.prediction import write_forecasts
    from mvlong.utils import parallel_map

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    if not os.path.exists(args.snapshot):
        raise UsageError(f"snapshot not found: {args.snapshot}")
    params, _ = load_snapshot(args.snapshot)
    dataset = load_cohort(args.cohort)
    if tuple(dataset.variables) != tuple(params.config.variables):
        raise UsageError("cohort variables do not match the snapshot")
    bins = _parse_bins(args.horizon_bins) if args.horizon_bins else EvalProtocol().bins
    bins = tuple(b for b in bins if b[0] >= args.truncate)
    if not bins:
        raise UsageError("no horizon bin lies after the truncation time")
    options = _dataclass_from(FitOptions, cfg.get("fit", {}), {"seed": seed})
    job = functools.partial(_predict_one, params=params, t_trunc=args.truncate, bins=bins,
                            n_samples=args.samples, seed=seed, options=options)
    results = parallel_map(job, dataset.patients, _workers(args))
    forecasts = [fc for fc, _ in results if fc is not None]
    os.makedirs(args.out, exist_ok=True)
    write_forecasts(forecasts, os.path.join(args.out, "forecasts.csv"),
                    os.path.join(args.out, "samples.csv") if args.write_samples else None,
                    log_scale=dataset.time_meta.get("log_transformed", ()))
    with open(os.path.join(args.out, "mae_by_bin.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lab", "bin", "mae", "n_patients"])
        for p, var in enumerate(params.config.variables):
            for k, b in enumerate(bins):
                vals = [m[(p, k)] for _, m in results if (p, k) in m]
                if vals:
                    w.writerow([var, bin_label(b), repr(float(np.mean(vals))), len(vals)])
    resolved = {"truncate": args.truncate, "bins": [list(b) for b in bins], "samples": args.samples,
                "snapshot": os.path.abspath(args.snapshot), "fit": _asdict(options)}
    resolved["fit"].pop("workers", None)
    write_manifest(args.out, "predict", resolved, seed,
                   {"snapshot": args.snapshot, "patients": os.path.join(args.cohort, "patients.jsonl")})
    print(f"forecasts for {len(forecasts)} patients -> {args.out}")
    return 0


def cmd_evaluate(args):
    from mvlong.data import load_cohort
    from mvlong.evaluation import EvalProtocol, run_benchmark

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    proto_section = dict(cfg.get("protocol", {}))
    if args.protocol:
        proto_section.update(load_config(args.protocol).get("protocol", {}))
    over = {"seed": seed, "n_folds": args.folds, "folds_to_run": args.folds_to_run}
    protocol = _dataclass_from(EvalProtocol, proto_section, over)
    dataset = load_cohort(args.cohort)
    config = _model_config(cfg.get("model", {}), dataset)
    options = _fit_options(cfg, args, seed)
    report = run_benchmark(dataset, config, protocol, options, workers=_workers(args))
    names = dataset.time_meta.get("roster", {}).get("display_names") or {}
    report.write(args.out, names)
    resolved = {"model": config.to_dict(), "fit": _asdict(options), "protocol": protocol.to_dict()}
    resolved["fit"].pop("workers", None)
    write_manifest(args.out, "evaluate", resolved, seed,
                   {"patients": os.path.join(args.cohort, "patients.jsonl"), "config": args.config,
                    "protocol": args.protocol})
    sys.stdout.write(report.render_table(names))
    return 0


def cmd_gradcheck(args):
    from mvlong.diagnostics import run_gradcheck
    errors = run_gradcheck(args.seed)
    for name, val in errors.items():
        if name != "max":
            log.info("%s: %.3e", name, val)
    print(f"max relative gradient error: {errors['max']:.3e}")
    return 0 if errors["max"] < args.threshold else 1


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mvlong", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("simulate", help="draw a synthetic cohort")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="build a cohort from raw lab and demographics files")
    p.add_argument("--labs", nargs="+", required=True)
    p.add_argument("--demographics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="fail on malformed rows instead of skipping")
    p.add_argument("--log-acr", action="store_true", help="log-transform the albumin-creatinine ratio")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="fit the model to a cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="forecast held-out trajectories after a truncation time")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--config")
    p.add_argument("--truncate", type=float, required=True)
    p.add_argument("--horizon-bins", nargs="+", metavar="LO,HI")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--write-samples", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="cross-validated benchmark against per-lab baselines")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config")
    p.add_argument("--protocol", help="TOML file with a [protocol] section")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--folds-to-run", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the bound's gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
