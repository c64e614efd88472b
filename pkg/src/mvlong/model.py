"""The generative model: parameters, patient records, densities and sampling.

Cluster and subpopulation indices are 0-based throughout; cluster 0 is the
reference cluster whose row of ``W`` is pinned to zero.
"""
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from mvlong.core import (
    LOG_2PI,
    GaussianDist,
    OUKernelParams,
    ParameterError,
    SplineBasis,
    bspline_design,
    chol_logdet,
    jittered_cholesky,
    linear_design,
    log_softmax,
    mvn_logpdf,
    ou_cov_factor,
    softmax,
)

D_LINEAR = 2
SNAPSHOT_VERSION = 1


@dataclass
class ModelConfig:
    variables: tuple
    n_clusters: int = 6
    n_subpops: tuple = None
    n_covariates: int = 1
    spline_degree: int = 3
    n_interior_knots: int = 8
    prior_sd: float = 10.0
    units: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self):
        self.variables = tuple(self.variables)
        if self.n_subpops is None:
            self.n_subpops = (4,) * len(self.variables)
        elif np.isscalar(self.n_subpops):
            self.n_subpops = (int(self.n_subpops),) * len(self.variables)
        self.n_subpops = tuple(int(g) for g in self.n_subpops)
        self.units = tuple(self.units)
        self.covariate_names = tuple(self.covariate_names)
        if not self.variables:
            raise ParameterError("at least one variable is required")
        if len(self.n_subpops) != len(self.variables):
            raise ParameterError("n_subpops must have one entry per variable")
        if self.n_clusters < 1 or self.n_covariates < 1 or min(self.n_subpops) < 1:
            raise ParameterError("cluster, subpopulation and covariate counts must be >= 1")

    @property
    def P(self):
        return len(self.variables)

    @property
    def d_z(self):
        return self.n_interior_knots + self.spline_degree + 1

    @property
    def d_l(self):
        return D_LINEAR

    def subset(self, indices, n_clusters=None):
        """Config restricted to the variables at ``indices``."""
        idx = list(indices)
        return ModelConfig(
            variables=[self.variables[i] for i in idx],
            n_clusters=self.n_clusters if n_clusters is None else n_clusters,
            n_subpops=[self.n_subpops[i] for i in idx],
            n_covariates=self.n_covariates,
            spline_degree=self.spline_degree,
            n_interior_knots=self.n_interior_knots,
            prior_sd=self.prior_sd,
            units=[self.units[i] for i in idx] if self.units else (),
            covariate_names=self.covariate_names,
        )

    def to_dict(self):
        return {
            "variables": list(self.variables),
            "n_clusters": self.n_clusters,
            "n_subpops": list(self.n_subpops),
            "n_covariates": self.n_covariates,
            "spline_degree": self.spline_degree,
            "n_interior_knots": self.n_interior_knots,
            "prior_sd": self.prior_sd,
            "units": list(self.units),
            "covariate_names": list(self.covariate_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    """Point estimate of all global parameters.

    ``Sigma_b`` is ordered variable-major: (intercept_1, slope_1, intercept_2, ...).
    """

    config: ModelConfig
    basis: SplineBasis
    Lambda: np.ndarray
    beta: list
    Psi: list
    amplitude: np.ndarray
    lengthscale: np.ndarray
    noise_var: np.ndarray
    W: np.ndarray
    Sigma_b: np.ndarray

    def __post_init__(self):
        self.Lambda = np.asarray(self.Lambda, dtype=float)
        self.beta = [np.asarray(b, dtype=float) for b in self.beta]
        self.Psi = [np.asarray(p, dtype=float) for p in self.Psi]
        self.amplitude = np.asarray(self.amplitude, dtype=float).reshape(-1)
        self.lengthscale = np.asarray(self.lengthscale, dtype=float).reshape(-1)
        self.noise_var = np.asarray(self.noise_var, dtype=float).reshape(-1)
        self.W = np.asarray(self.W, dtype=float)
        self.Sigma_b = np.asarray(self.Sigma_b, dtype=float)

    def validate(self, atol=1e-10):
        cfg = self.config
        P, G, q = cfg.P, cfg.n_clusters, cfg.n_covariates
        if self.basis.dim != cfg.d_z:
            raise ParameterError(f"basis dimension {self.basis.dim} != d_z {cfg.d_z}")
        if self.Lambda.shape != (P, q):
            raise ParameterError(f"Lambda must be {(P, q)}, got {self.Lambda.shape}")
        if self.W.shape != (G, q):
            raise ParameterError(f"W must be {(G, q)}, got {self.W.shape}")
        if np.any(self.W[0] != 0.0):
            raise ParameterError("first row of W must be exactly zero")
        for p in range(P):
            Gp = cfg.n_subpops[p]
            if self.beta[p].shape != (Gp, cfg.d_z):
                raise ParameterError(f"beta[{p}] must be {(Gp, cfg.d_z)}")
            if self.Psi[p].shape != (Gp, G):
                raise ParameterError(f"Psi[{p}] must be {(Gp, G)}")
            if np.any(self.Psi[p] < 0) or not np.allclose(self.Psi[p].sum(axis=0), 1.0, atol=atol):
                raise ParameterError(f"columns of Psi[{p}] must be probability vectors")
        for name in ("amplitude", "lengthscale", "noise_var"):
            arr = getattr(self, name)
            if arr.shape != (P,) or np.any(~(arr > 0)):
                raise ParameterError(f"{name} must be {P} positive values")
        D = P * D_LINEAR
        if self.Sigma_b.shape != (D, D) or not np.allclose(self.Sigma_b, self.Sigma_b.T, atol=1e-10):
            raise ParameterError("Sigma_b must be a symmetric matrix matching P * d_l")
        try:
            np.linalg.cholesky(self.Sigma_b)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("Sigma_b must be positive definite") from exc
        return self

    def kernel(self, p):
        return OUKernelParams(float(self.amplitude[p]), float(self.lengthscale[p]))

    def copy(self):
        return ModelParams(
            config=self.config,
            basis=self.basis,
            Lambda=self.Lambda.copy(),
            beta=[b.copy() for b in self.beta],
            Psi=[p.copy() for p in self.Psi],
            amplitude=self.amplitude.copy(),
            lengthscale=self.lengthscale.copy(),
            noise_var=self.noise_var.copy(),
            W=self.W.copy(),
            Sigma_b=self.Sigma_b.copy(),
        )

    def subset(self, indices, n_clusters=None):
        """Parameters of the sub-model over variables ``indices``.

        Keeps ``W`` and each ``Psi`` unless ``n_clusters`` differs, in which case
        the cluster-level parameters are reset (uniform ``Psi``, zero ``W``).
        """
        idx = list(indices)
        cfg = self.config.subset(idx, n_clusters=n_clusters)
        keep_clusters = cfg.n_clusters == self.config.n_clusters
        rows = np.concatenate([np.arange(D_LINEAR * i, D_LINEAR * (i + 1)) for i in idx])
        return ModelParams(
            config=cfg,
            basis=self.basis,
            Lambda=self.Lambda[idx].copy(),
            beta=[self.beta[i].copy() for i in idx],
            Psi=[self.Psi[i].copy() if keep_clusters
                 else np.full((cfg.n_subpops[k], cfg.n_clusters), 1.0 / cfg.n_subpops[k])
                 for k, i in enumerate(idx)],
            amplitude=self.amplitude[idx].copy(),
            lengthscale=self.lengthscale[idx].copy(),
            noise_var=self.noise_var[idx].copy(),
            W=self.W.copy() if keep_clusters else np.zeros((cfg.n_clusters, cfg.n_covariates)),
            Sigma_b=self.Sigma_b[np.ix_(rows, rows)].copy(),
        )

    def to_dict(self):
        return {
            "Lambda": self.Lambda.tolist(),
            "beta": [b.tolist() for b in self.beta],
            "Psi": [p.tolist() for p in self.Psi],
            "amplitude": self.amplitude.tolist(),
            "lengthscale": self.lengthscale.tolist(),
            "noise_var": self.noise_var.tolist(),
            "W": self.W.tolist(),
            "Sigma_b": self.Sigma_b.tolist(),
        }


@dataclass
class PatientRecord:
    """Covariates and per-variable observation sequences for one individual."""

    id: str
    x: np.ndarray
    times: list
    values: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.times = [np.asarray(t, dtype=float).reshape(-1) for t in self.times]
        self.values = [np.asarray(v, dtype=float).reshape(-1) for v in self.values]
        if len(self.times) != len(self.values):
            raise ValueError(f"patient {self.id}: times/values variable count mismatch")
        if not np.all(np.isfinite(self.x)):
            raise ValueError(f"patient {self.id}: covariates must be finite")
        for p, (t, v) in enumerate(zip(self.times, self.values)):
            if t.shape != v.shape:
                raise ValueError(f"patient {self.id}: variable {p} has {t.size} times, {v.size} values")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
                raise ValueError(f"patient {self.id}: variable {p} has non-finite entries")
            if np.any(np.diff(t) < 0):
                raise ValueError(f"patient {self.id}: variable {p} times are not ascending")

    @property
    def n_vars(self):
        return len(self.times)

    @property
    def n_obs(self):
        return np.array([t.size for t in self.times], dtype=int)

    def select(self, indices):
        idx = list(indices)
        return PatientRecord(self.id, self.x, [self.times[i] for i in idx],
                             [self.values[i] for i in idx], dict(self.meta))

    def to_dict(self):
        return {
            "id": self.id,
            "x": self.x.tolist(),
            "times": [t.tolist() for t in self.times],
            "values": [v.tolist() for v in self.values],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["x"], d["times"], d["values"], d.get("meta", {}))


@dataclass
class LatentState:
    c: int
    z: np.ndarray
    b: np.ndarray
    f: list

    def to_dict(self):
        return {"c": int(self.c), "z": [int(v) for v in self.z], "b": self.b.tolist(),
                "f": [v.tolist() for v in self.f]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["c"], np.asarray(d["z"], dtype=int), np.asarray(d["b"], dtype=float),
                   [np.asarray(v, dtype=float) for v in d["f"]])


def _check_var(params, p):
    if not 0 <= p < params.config.P:
        raise IndexError(f"variable index {p} out of range")


def mean_function(params, x, z_ip, b_ip, f_ip, times, p):
    """Fixed effect + subpopulation curve + random effect line + GP deviation."""
    _check_var(params, p)
    if not 0 <= z_ip < params.config.n_subpops[p]:
        raise IndexError(f"subpopulation index {z_ip} out of range for variable {p}")
    times = np.asarray(times, dtype=float).reshape(-1)
    mu = float(params.Lambda[p] @ np.asarray(x, dtype=float))
    mu = mu + bspline_design(params.basis, times) @ params.beta[p][z_ip]
    mu = mu + linear_design(times) @ np.asarray(b_ip, dtype=float)
    if f_ip is not None:
        mu = mu + np.asarray(f_ip, dtype=float)
    return mu


def cluster_prior(params, x):
    return softmax(params.W @ np.asarray(x, dtype=float))


def subpop_conditional(params, p, c):
    _check_var(params, p)
    if not 0 <= c < params.config.n_clusters:
        raise IndexError(f"cluster index {c} out of range")
    return params.Psi[p][:, c].copy()


def _b_slice(p):
    return slice(D_LINEAR * p, D_LINEAR * (p + 1))


def joint_log_density(params, patient, latent):
    """``log p(y, c, z, b, f | Theta)`` for one patient (no ``p(Theta)`` term)."""
    cfg = params.config
    if patient.n_vars != cfg.P or len(latent.z) != cfg.P or len(latent.f) != cfg.P:
        raise ValueError("patient/latent variable count does not match the model")
    if latent.b.shape != (cfg.P * D_LINEAR,):
        raise ValueError("random-effect vector has the wrong length")
    if patient.x.shape != (cfg.n_covariates,):
        raise ValueError("covariate vector has the wrong length")
    with np.errstate(divide="ignore"):
        logp = float(np.log(cluster_prior(params, patient.x)[latent.c]))
    sb_chol = np.linalg.cholesky(params.Sigma_b)
    logp += mvn_logpdf(latent.b, GaussianDist(np.zeros(latent.b.size), sb_chol))
    for p in range(cfg.P):
        with np.errstate(divide="ignore"):
            logp += float(np.log(params.Psi[p][latent.z[p], latent.c]))
        t, y, f = patient.times[p], patient.values[p], np.asarray(latent.f[p], dtype=float)
        if f.shape != t.shape:
            raise ValueError(f"f for variable {p} has {f.size} values, expected {t.size}")
        if t.size == 0:
            continue
        _, k_chol = ou_cov_factor(params.kernel(p), t)
        logp += mvn_logpdf(f, GaussianDist(np.zeros(t.size), k_chol))
        mu = mean_function(params, patient.x, latent.z[p], latent.b[_b_slice(p)], f, t, p)
        s2 = params.noise_var[p]
        logp += float(-0.5 * np.sum(LOG_2PI + np.log(s2) + (y - mu) ** 2 / s2))
    return logp


def sample_patient(params, x, obs_times, rng, patient_id="sim"):
    """Ancestral draw c -> z -> (b, f) -> y at caller-supplied observation times."""
    cfg = params.config
    x = np.asarray(x, dtype=float)
    c = int(rng.choice(cfg.n_clusters, p=cluster_prior(params, x)))
    z = np.array([rng.choice(cfg.n_subpops[p], p=params.Psi[p][:, c]) for p in range(cfg.P)], dtype=int)
    sb_chol, _ = jittered_cholesky(params.Sigma_b, scale=max(np.max(np.diag(params.Sigma_b)), 1e-300))
    b = sb_chol @ rng.standard_normal(cfg.P * D_LINEAR)
    fs, ys = [], []
    for p in range(cfg.P):
        t = np.sort(np.asarray(obs_times[p], dtype=float))
        if t.size:
            _, k_chol = ou_cov_factor(params.kernel(p), t)
            f = k_chol @ rng.standard_normal(t.size)
        else:
            f = np.zeros(0)
        mu = mean_function(params, x, z[p], b[_b_slice(p)], f, t, p)
        y = mu + np.sqrt(params.noise_var[p]) * rng.standard_normal(t.size)
        fs.append(f)
        ys.append((t, y))
    record = PatientRecord(patient_id, x, [t for t, _ in ys], [y for _, y in ys])
    return record, LatentState(c, z, b, fs)


def marginal_covariance(params, patient):
    """Covariance of the stacked observations given (c, z), with b and f integrated out."""
    cfg = params.config
    blocks_l, blocks_k = [], []
    for p in range(cfg.P):
        t = patient.times[p]
        lin = np.zeros((t.size, cfg.P * D_LINEAR))
        lin[:, _b_slice(p)] = linear_design(t)
        blocks_l.append(lin)
        if t.size:
            k, _ = ou_cov_factor(params.kernel(p), t)
            blocks_k.append(k + params.noise_var[p] * np.eye(t.size))
        else:
            blocks_k.append(np.zeros((0, 0)))
    lin = np.vstack(blocks_l)
    cov = lin @ params.Sigma_b @ lin.T
    start = 0
    for k in blocks_k:
        m = k.shape[0]
        cov[start:start + m, start:start + m] += k
        start += m
    return cov


def exact_log_evidence(params, patient, max_obs=200, max_configs=10_000):
    """``log p(y | Theta)`` by enumerating (c, z) and integrating b, f analytically.

    Only for small instances: at most ``max_obs`` observations and
    ``G * prod(G_p)`` at most ``max_configs``.
    """
    cfg = params.config
    n_total = int(patient.n_obs.sum())
    n_configs = cfg.n_clusters * int(np.prod(cfg.n_subpops))
    if n_total > max_obs or n_configs > max_configs:
        raise ValueError(f"instance too large for enumeration ({n_total} obs, {n_configs} configurations)")
    log_pi = np.log(cluster_prior(params, patient.x))
    with np.errstate(divide="ignore"):
        log_psi = [np.log(psi) for psi in params.Psi]
    y = np.concatenate(patient.values) if n_total else np.zeros(0)
    if n_total:
        cov = marginal_covariance(params, patient)
        chol = np.linalg.cholesky(cov)
        logdet = chol_logdet(chol)
        # curve contributions per (variable, subpopulation)
        curves = []
        for p in range(cfg.P):
            t = patient.times[p]
            base = params.Lambda[p] @ patient.x
            curves.append(base + bspline_design(params.basis, t) @ params.beta[p].T)
    else:
        chol = logdet = curves = None
    z_ranges = [range(g) for g in cfg.n_subpops]
    z_list = list(itertools.product(*z_ranges))
    loglik = np.zeros(len(z_list))
    if n_total:
        means = np.array([np.concatenate([curves[p][:, z[p]] for p in range(cfg.P)]) for z in z_list])
        resid = (y[None, :] - means).T
        alpha = np.linalg.solve(chol, resid)
        loglik = -0.5 * (n_total * LOG_2PI + logdet + np.sum(alpha**2, axis=0))
    terms = []
    for c in range(cfg.n_clusters):
        for k, z in enumerate(z_list):
            terms.append(log_pi[c] + sum(log_psi[p][z[p], c] for p in range(cfg.P)) + loglik[k])
    return float(logsumexp(terms))


def random_params(config, rng, basis=None, t_span=(0.0, 10.0), curve_scale=3.0,
                  noise_sd=0.5, amp=0.7, lengthscale=1.0, b_scale=0.5, w_scale=1.0):
    """Random valid parameters; used for tests, gradient checks and simulation."""
    P, G, q = config.P, config.n_clusters, config.n_covariates
    if basis is None:
        basis = SplineBasis.evenly_spaced(t_span[0], t_span[1], config.n_interior_knots,
                                          config.spline_degree)
    W = w_scale * rng.standard_normal((G, q))
    W[0] = 0.0
    a = rng.standard_normal((P * D_LINEAR, P * D_LINEAR))
    sigma_b = b_scale**2 * (a @ a.T / (P * D_LINEAR) + 0.5 * np.eye(P * D_LINEAR))
    return ModelParams(
        config=config,
        basis=basis,
        Lambda=rng.standard_normal((P, q)),
        beta=[curve_scale * rng.standard_normal((g, config.d_z)) for g in config.n_subpops],
        Psi=[rng.dirichlet(np.ones(g), size=G).T for g in config.n_subpops],
        amplitude=np.full(P, amp) * np.exp(0.2 * rng.standard_normal(P)),
        lengthscale=np.full(P, lengthscale) * np.exp(0.2 * rng.standard_normal(P)),
        noise_var=(np.full(P, noise_sd) * np.exp(0.2 * rng.standard_normal(P))) ** 2,
        W=W,
        Sigma_b=sigma_b,
    )


def save_snapshot(params, path, meta=None):
    doc = {
        "version": SNAPSHOT_VERSION,
        "config": params.config.to_dict(),
        "spline": {
            "degree": params.basis.degree,
            "interior_knots": list(params.basis.interior_knots),
            "boundary": list(params.basis.boundary),
            "knot_vector": params.basis.knot_vector.tolist(),
        },
        "time_span": list(params.basis.boundary),
        "params": params.to_dict(),
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_snapshot(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    sp = doc["spline"]
    basis = SplineBasis(sp["degree"], tuple(sp["interior_knots"]), tuple(sp["boundary"]))
    params = ModelParams(config=config, basis=basis, **doc["params"]).validate()
    return params, doc.get("meta", {})
