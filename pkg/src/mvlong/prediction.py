"""Held-out local fitting, conditional-GP extension of f, and posterior-predictive forecasts."""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from mvlong.core import GaussianDist, bspline_design, linear_design, ou_cov_factor, ou_kernel_matrix
from mvlong.inference import FitOptions, init_local, local_update
from mvlong.model import D_LINEAR


@dataclass
class ForecastRequest:
    patient: object
    target_times: list
    n_samples: int = 1000
    seed: int = 0
    truncation_time: float = None

    def __post_init__(self):
        self.target_times = [np.asarray(t, dtype=float).reshape(-1) for t in self.target_times]
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.truncation_time is not None:
            for t in self.target_times:
                if np.any(t <= self.truncation_time):
                    raise ValueError("target times must be strictly after the truncation time")


@dataclass
class Forecast:
    """Per-variable predictive summaries at the requested target times.

    ``mean`` is the sample mean; ``sd`` and ``analytic_mean`` are the exact
    moments of the mean-field predictive mixture (``sd`` therefore never
    drops below the observation noise SD).
    """

    patient_id: str
    variables: tuple
    target_times: list
    mean: list
    sd: list
    analytic_mean: list
    samples: list


def fit_heldout_local(params, patient, options=None):
    """Locals for an unseen patient with Theta held fixed.

    A patient without any observation keeps the prior moments: they give the
    exact per-variable predictive marginals, whereas the mean-field fixed
    point for q(c) q(z) would not.
    """
    options = options or FitOptions()
    local = init_local(params, patient)
    if not np.any(patient.n_obs):
        return local
    return local_update(params, patient, local, options.heldout_iters, tol=options.heldout_tol, restart=True)


def extend_f(params, local, p, target_times, obs_times):
    """q(f_p) pushed to ``target_times`` through the GP conditional on the observed times.

    With ``A = K_to K_oo^-1``: mean ``A mu_f``, covariance ``K_tt - A (K_oo - S_f) A^T``.
    Without observations the prior marginals are returned.
    """
    kern = params.kernel(p)
    target_times = np.asarray(target_times, dtype=float).reshape(-1)
    obs_times = np.asarray(obs_times, dtype=float).reshape(-1)
    k_tt = ou_kernel_matrix(kern, target_times)
    if obs_times.size == 0:
        return GaussianDist(np.zeros(target_times.size), _psd_factor(k_tt))
    if local.f_mean[p].size != obs_times.size:
        raise ValueError("observed times do not match the variational f dimension")
    k_oo, k_chol = ou_cov_factor(kern, obs_times)
    k_to = ou_kernel_matrix(kern, target_times, obs_times)
    gain = cho_solve((k_chol, True), k_to.T).T
    s_f = local.f_chol[p] @ local.f_chol[p].T
    mean = gain @ local.f_mean[p]
    cov = k_tt - gain @ (k_oo - s_f) @ gain.T
    return GaussianDist(mean, _psd_factor(0.5 * (cov + cov.T)))


def _psd_factor(cov):
    """Square-root factor of a PSD matrix; tiny negative eigenvalues are clipped.

    The factor is not triangular, but ``F F^T`` reproduces the clipped matrix.
    """
    if cov.size == 0:
        return np.zeros((0, 0))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _mixture_parts(params, local, patient, p, t):
    x = patient.x
    curves = params.Lambda[p] @ x + bspline_design(params.basis, t) @ params.beta[p].T
    lin = linear_design(t)
    blk = slice(D_LINEAR * p, D_LINEAR * (p + 1))
    f_dist = extend_f(params, local, p, t, patient.times[p])
    return curves, lin, blk, f_dist


def predictive_moments(params, local, patient, p, target_times):
    """Exact mean and covariance of the predictive mixture for variable ``p``."""
    t = np.asarray(target_times, dtype=float).reshape(-1)
    curves, lin, blk, f_dist = _mixture_parts(params, local, patient, p, t)
    nu = local.nu_z[p]
    mix_mean = curves @ nu
    s_b = local.b_chol @ local.b_chol.T
    mean = mix_mean + lin @ local.b_mean[blk] + f_dist.mean
    cov = (curves * nu) @ curves.T - np.outer(mix_mean, mix_mean)
    cov += lin @ s_b[blk, blk] @ lin.T + f_dist.cov + params.noise_var[p] * np.eye(t.size)
    return mean, cov


def predictive_draws(params, local, request, rng=None):
    """Sample y* = fixed + curve_z + line_b + f* + noise with z ~ nu_z, b ~ q(b), f* ~ extend_f."""
    rng = rng if rng is not None else np.random.default_rng(request.seed)
    patient = request.patient
    cfg = params.config
    S = request.n_samples
    b_draws = local.b_mean + rng.standard_normal((S, local.b_mean.size)) @ local.b_chol.T
    means, sds, amean, samples = [], [], [], []
    for p in range(cfg.P):
        t = request.target_times[p]
        if t.size == 0:
            means.append(np.zeros(0))
            sds.append(np.zeros(0))
            amean.append(np.zeros(0))
            samples.append(np.zeros((S, 0)))
            continue
        curves, lin, blk, f_dist = _mixture_parts(params, local, patient, p, t)
        nu = local.nu_z[p] / local.nu_z[p].sum()
        z = rng.choice(nu.size, size=S, p=nu)
        f_draws = f_dist.mean + rng.standard_normal((S, t.size)) @ f_dist.chol.T
        noise = np.sqrt(params.noise_var[p]) * rng.standard_normal((S, t.size))
        draws = curves[:, z].T + b_draws[:, blk] @ lin.T + f_draws + noise
        mean, cov = predictive_moments(params, local, patient, p, t)
        samples.append(draws)
        means.append(draws.mean(axis=0))
        sds.append(np.sqrt(np.maximum(np.diag(cov), params.noise_var[p])))
        amean.append(mean)
    return Forecast(patient.id, cfg.variables, request.target_times, means, sds, amean, samples)


def point_forecast(forecast):
    return [m.copy() for m in forecast.mean]


def forecast_patient(params, patient, target_times, n_samples=1000, seed=0, options=None, rng=None,
                     truncation_time=None):
    local = fit_heldout_local(params, patient, options)
    request = ForecastRequest(patient, target_times, n_samples, seed, truncation_time)
    return predictive_draws(params, local, request, rng=rng), local


def write_forecasts(forecasts, path, samples_path=None, log_scale=()):
    """Forecast CSV; for variables in ``log_scale`` the last column is the mean of exp(draws)."""
    log_scale = set(log_scale)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "variable", "target_time", "pred_mean", "pred_sd", "pred_mean_original_scale"])
        for fc in forecasts:
            for p, var in enumerate(fc.variables):
                if var in log_scale:
                    orig = np.exp(fc.samples[p]).mean(axis=0)
                else:
                    orig = fc.mean[p]
                for t, m, s, o in zip(fc.target_times[p], fc.mean[p], fc.sd[p], orig):
                    w.writerow([fc.patient_id, var, repr(float(t)), repr(float(m)), repr(float(s)), repr(float(o))])
    if samples_path is not None:
        with open(samples_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "variable", "target_time", "sample", "value"])
            for fc in forecasts:
                for p, var in enumerate(fc.variables):
                    for j, t in enumerate(fc.target_times[p]):
                        for s, v in enumerate(fc.samples[p][:, j]):
                            w.writerow([fc.patient_id, var, repr(float(t)), s, repr(float(v))])
