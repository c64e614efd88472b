"""Mean-field variational inference for the multivariate trajectory model.

Locals are refined by exact coordinate ascent (each block is moved to its
closed-form optimum with the others held fixed, so the per-patient bound
never decreases). Globals take stochastic RMSProp steps along the analytic
ELBO gradient computed on minibatches.

Unconstrained coordinates
-------------------------
globals : Lambda, beta, log Psi (column softmax), log a, log l, log sigma,
          W rows 1.., Cholesky factor of Sigma_b with log diagonal.
locals  : log nu_c, log nu_z, b mean, Cholesky factor of S_b (log diagonal),
          f means and Cholesky factors of S_f (log diagonal).
"""
import csv
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from mvlong import _kernels
from mvlong.core import (
    LOG_2PI,
    FactorizationError,
    SplineBasis,
    bspline_design,
    chol_inverse,
    jittered_cholesky,
    linear_design,
    log_softmax,
    ou_cov_factor,
    softmax,
)
from mvlong.model import D_LINEAR, ModelParams, PatientRecord

log = logging.getLogger(__name__)

LOGIT_FLOOR = -700.0


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------

@dataclass
class LocalVariational:
    """Per-patient variational parameters; Gaussians carry lower Cholesky factors."""

    nu_c: np.ndarray
    nu_z: list
    b_mean: np.ndarray
    b_chol: np.ndarray
    f_mean: list
    f_chol: list

    def copy(self):
        return LocalVariational(self.nu_c.copy(), [v.copy() for v in self.nu_z],
                                self.b_mean.copy(), self.b_chol.copy(),
                                [m.copy() for m in self.f_mean], [c.copy() for c in self.f_chol])

    def validate(self, atol=1e-12):
        for nu in [self.nu_c, *self.nu_z]:
            if np.any(nu < 0) or abs(nu.sum() - 1.0) > atol * max(1, nu.size):
                raise ValueError("variational class probabilities must lie on the simplex")
        for chol in [self.b_chol, *self.f_chol]:
            if chol.size and (np.any(np.diag(chol) <= 0) or np.any(np.triu(chol, 1) != 0)):
                raise ValueError("covariance factors must be lower triangular with positive diagonal")
        return self

    def to_dict(self):
        return {
            "nu_c": self.nu_c.tolist(),
            "nu_z": [v.tolist() for v in self.nu_z],
            "b_mean": self.b_mean.tolist(),
            "b_chol": self.b_chol.tolist(),
            "f_mean": [m.tolist() for m in self.f_mean],
            "f_chol": [c.tolist() for c in self.f_chol],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["nu_c"], dtype=float),
            [np.asarray(v, dtype=float) for v in d["nu_z"]],
            np.asarray(d["b_mean"], dtype=float),
            np.asarray(d["b_chol"], dtype=float),
            [np.asarray(m, dtype=float) for m in d["f_mean"]],
            [np.asarray(c, dtype=float).reshape(len(m), len(m)) for m, c in zip(d["f_mean"], d["f_chol"])],
        )


@dataclass
class OptimizerState:
    """RMSProp accumulators: r <- rho r + (1 - rho) g^2, step = lr g / (sqrt(r) + eps)."""

    decay: float = 0.9
    learning_rate: float = 0.01
    eps: float = 1e-8
    sq_avg: np.ndarray = None
    iteration: int = 0

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError("RMSProp decay must lie in (0, 1)")
        if not (self.learning_rate > 0 and self.eps > 0):
            raise ValueError("learning rate and epsilon must be positive")

    def step(self, theta, grad):
        if self.sq_avg is None:
            self.sq_avg = np.zeros_like(grad)
        self.sq_avg = self.decay * self.sq_avg + (1.0 - self.decay) * grad**2
        self.iteration += 1
        return theta + self.learning_rate * grad / (np.sqrt(self.sq_avg) + self.eps)


@dataclass
class FitOptions:
    batch_size: int = 256
    max_epochs: int = 100
    local_iters: int = 5
    tol: float = 1e-6
    window: int = 5
    eval_subsample: int = 2000
    learning_rate: float = 0.01
    decay: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    standardize: bool = True
    include_theta_prior: bool = True
    init: str = "kmeans"
    heldout_iters: int = 50
    heldout_tol: float = 1e-8
    restart_every: int = 1
    lr_decay: float = 0.0
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str = None

    def __post_init__(self):
        if (min(self.batch_size, self.max_epochs, self.window, self.eval_subsample) < 1
                or self.local_iters < 0 or self.restart_every < 0):
            raise ValueError("counts in FitOptions must be positive")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be non-negative")
        if self.init not in ("kmeans", "random"):
            raise ValueError(f"unknown init scheme {self.init!r}")


@dataclass
class FitResult:
    params: ModelParams
    locals: list
    trace: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.locals, self.trace))


# --------------------------------------------------------------------------
# Cached design quantities
# --------------------------------------------------------------------------

class PatientDesign:
    """Time-only design matrices for one patient (independent of Theta)."""

    __slots__ = ("record", "x", "t", "y", "Z", "L", "absdiff", "n")

    def __init__(self, basis, record):
        self.record = record
        self.x = record.x
        self.t = record.times
        self.y = record.values
        self.n = [t.size for t in record.times]
        self.Z = [bspline_design(basis, t) for t in record.times]
        self.L = [linear_design(t) for t in record.times]
        self.absdiff = [np.abs(np.subtract.outer(t, t)) for t in record.times]


def as_design(basis, patient):
    if isinstance(patient, PatientDesign):
        return patient
    return PatientDesign(basis, patient)


class _Globals:
    """Quantities derived from Theta once per pass."""

    def __init__(self, params):
        self.params = params
        cfg = params.config
        self.log_psi = [np.log(psi) for psi in params.Psi]
        self.sb_chol = np.linalg.cholesky(params.Sigma_b)
        self.sb_inv = chol_inverse(self.sb_chol)
        self.sb_logdet = 2.0 * float(np.sum(np.log(np.diag(self.sb_chol))))
        self.sigma2 = params.noise_var
        self.kernels = [params.kernel(p) for p in range(cfg.P)]


def _bs(p):
    return slice(D_LINEAR * p, D_LINEAR * (p + 1))


def _tril_grad(dS, chol):
    """Gradient w.r.t. a log-diagonal Cholesky parameterization, given dE/dS."""
    g = np.tril(2.0 * dS @ chol)
    idx = np.diag_indices_from(g)
    g[idx] = g[idx] * chol[idx]
    return g


def _safe_log(nu):
    return np.log(np.maximum(nu, np.exp(LOGIT_FLOOR)))


def _normalize_logits(logits):
    ls = log_softmax(logits)
    return np.exp(np.maximum(ls, LOGIT_FLOOR))


# --------------------------------------------------------------------------
# Per-patient ELBO and gradients
# --------------------------------------------------------------------------

def _patient_terms(gc, pd, lv, want_grad, parts=None):
    """Per-patient bound; ``parts`` (a list) receives the additive components."""
    params = gc.params
    cfg = params.config
    x = pd.x
    log_pi = log_softmax(params.W @ x)
    nu_c = lv.nu_c
    log_nu_c = _safe_log(nu_c)
    terms = [float(nu_c @ log_pi), -float(nu_c @ log_nu_c)]
    h_c = log_pi - log_nu_c

    D = cfg.P * D_LINEAR
    s_b = lv.b_chol @ lv.b_chol.T
    m_b = np.outer(lv.b_mean, lv.b_mean) + s_b
    terms += [-0.5 * D * LOG_2PI, -0.5 * gc.sb_logdet, -0.5 * float(np.sum(gc.sb_inv * m_b))]
    terms += [0.5 * D * (1.0 + LOG_2PI), float(np.sum(np.log(np.diag(lv.b_chol))))]

    if want_grad:
        gg = {
            "Lambda": np.zeros_like(params.Lambda),
            "beta": [np.zeros_like(b) for b in params.beta],
            "psi": [np.zeros_like(p) for p in params.Psi],
            "log_amp": np.zeros(cfg.P),
            "log_len": np.zeros(cfg.P),
            "log_sigma": np.zeros(cfg.P),
            "W": np.outer(nu_c - np.exp(log_pi), x),
            "Sigma_b": 0.5 * (gc.sb_inv @ m_b @ gc.sb_inv - gc.sb_inv),
        }
        g_b_mean = -gc.sb_inv @ lv.b_mean
        d_sb_local = -0.5 * gc.sb_inv
        g_z, g_f_mean, g_f_chol = [], [], []

    for p in range(cfg.P):
        nu_z = lv.nu_z[p]
        log_psi = gc.log_psi[p]
        log_nu_z = _safe_log(nu_z)
        cross = log_psi @ nu_c
        terms += [float(nu_z @ cross), -float(nu_z @ log_nu_z)]
        h_z = cross - log_nu_z
        h_c = h_c + log_psi.T @ nu_z
        if want_grad:
            gg["psi"][p] += nu_c[None, :] * (nu_z[:, None] - params.Psi[p])
        n = pd.n[p]
        if n == 0:
            if want_grad:
                g_z.append(nu_z * (h_z - nu_z @ h_z))
                g_f_mean.append(np.zeros(0))
                g_f_chol.append(np.zeros((0, 0)))
            continue
        sigma2 = gc.sigma2[p]
        Z, Lm, y = pd.Z[p], pd.L[p], pd.y[p]
        fm, fl = lv.f_mean[p], lv.f_chol[p]
        bp = lv.b_mean[_bs(p)]
        s_bp = s_b[_bs(p), _bs(p)]
        curves = Z @ params.beta[p].T
        base = y - params.Lambda[p] @ x - Lm @ bp - fm
        ss, ebar = _kernels.residual_sums(base, curves, nu_z)
        q_sum = float(nu_z @ ss + np.sum((Lm @ s_bp) * Lm) + np.sum(fl * fl))
        terms += [-0.5 * n * LOG_2PI, -0.5 * n * np.log(sigma2), -0.5 * q_sum / sigma2]

        kern = gc.kernels[p]
        k_mat, k_chol = ou_cov_factor(kern, pd.t[p])
        alpha = cho_solve((k_chol, True), fm)
        k_inv_fl = solve_triangular(k_chol, fl, lower=True)
        logdet_k = 2.0 * float(np.sum(np.log(np.diag(k_chol))))
        terms += [-0.5 * n * LOG_2PI, -0.5 * logdet_k, -0.5 * float(fm @ alpha),
                  -0.5 * float(np.sum(k_inv_fl**2))]
        terms += [0.5 * n * (1.0 + LOG_2PI), float(np.sum(np.log(np.diag(fl))))]

        h_z = h_z - 0.5 * ss / sigma2
        if want_grad:
            g_z.append(nu_z * (h_z - nu_z @ h_z))
            g_f_mean.append(ebar / sigma2 - alpha)
            k_inv = chol_inverse(k_chol)
            d_sf = -0.5 * (np.eye(n) / sigma2 + k_inv)
            gfl = _tril_grad(d_sf, fl)
            gfl[np.diag_indices(n)] += 1.0
            g_f_chol.append(gfl)
            g_b_mean[_bs(p)] += Lm.T @ ebar / sigma2
            d_sb_local[_bs(p), _bs(p)] += -0.5 * (Lm.T @ Lm) / sigma2

            gg["Lambda"][p] += (ebar.sum() / sigma2) * x
            resid = base[:, None] - curves
            gg["beta"][p] += nu_z[:, None] * (Z.T @ resid).T / sigma2
            gg["log_sigma"][p] += -n + q_sum / sigma2
            m_f = np.outer(fm, fm) + fl @ fl.T
            g_k = 0.5 * (k_inv @ m_f @ k_inv - k_inv)
            gg["log_amp"][p] += 2.0 * float(np.sum(g_k * k_mat))
            gg["log_len"][p] += float(np.sum(g_k * k_mat * pd.absdiff[p])) / kern.lengthscale

    value = float(sum(terms))
    if parts is not None:
        parts.extend(terms)
    if not want_grad:
        return value, None, None
    gb_chol = _tril_grad(d_sb_local, lv.b_chol)
    gb_chol[np.diag_indices(D)] += 1.0
    local_grad = {
        "c": nu_c * (h_c - nu_c @ h_c),
        "z": g_z,
        "b_mean": g_b_mean,
        "b_chol": gb_chol,
        "f_mean": g_f_mean,
        "f_chol": g_f_chol,
    }
    return value, local_grad, gg


def theta_log_prior(params, constants=True):
    """Vague normal on Lambda, beta and free rows of W; uniform on Psi columns."""
    s2 = params.config.prior_sd**2
    coeffs = [params.Lambda.ravel(), params.W[1:].ravel(), *[b.ravel() for b in params.beta]]
    flat = np.concatenate(coeffs)
    value = -0.5 * float(flat @ flat) / s2
    if not constants:
        return value
    value -= 0.5 * flat.size * np.log(2.0 * np.pi * s2)
    G = params.config.n_clusters
    value += sum(G * float(gammaln(g)) for g in params.config.n_subpops)
    return value


def _theta_prior_grad(params):
    s2 = params.config.prior_sd**2
    W = -params.W / s2
    W[0] = 0.0
    return {
        "Lambda": -params.Lambda / s2,
        "beta": [-b / s2 for b in params.beta],
        "psi": [np.zeros_like(p) for p in params.Psi],
        "log_amp": np.zeros(params.config.P),
        "log_len": np.zeros(params.config.P),
        "log_sigma": np.zeros(params.config.P),
        "W": W,
        "Sigma_b": np.zeros_like(params.Sigma_b),
    }


def _add_grads(acc, g, scale=1.0):
    for key, val in g.items():
        if isinstance(val, list):
            for a, v in zip(acc[key], val):
                a += scale * v
        else:
            acc[key] += scale * val


def _zero_grads(params):
    return {
        "Lambda": np.zeros_like(params.Lambda),
        "beta": [np.zeros_like(b) for b in params.beta],
        "psi": [np.zeros_like(p) for p in params.Psi],
        "log_amp": np.zeros(params.config.P),
        "log_len": np.zeros(params.config.P),
        "log_sigma": np.zeros(params.config.P),
        "W": np.zeros_like(params.W),
        "Sigma_b": np.zeros_like(params.Sigma_b),
    }


# --------------------------------------------------------------------------
# Flattening between structured and unconstrained coordinates
# --------------------------------------------------------------------------

def _pack_chol(chol):
    c = chol.copy()
    idx = np.diag_indices_from(c)
    c[idx] = np.log(c[idx])
    return c[np.tril_indices(c.shape[0])]


def _unpack_chol(vec, n):
    c = np.zeros((n, n))
    c[np.tril_indices(n)] = vec
    idx = np.diag_indices(n)
    c[idx] = np.exp(c[idx])
    return c


def _tril_vec(mat):
    return mat[np.tril_indices(mat.shape[0])]


def pack_globals(params):
    cfg = params.config
    parts = [params.Lambda.ravel()]
    parts += [b.ravel() for b in params.beta]
    parts += [np.log(p).ravel() for p in params.Psi]
    parts += [np.log(params.amplitude), np.log(params.lengthscale), 0.5 * np.log(params.noise_var)]
    parts.append(params.W[1:].ravel())
    parts.append(_pack_chol(np.linalg.cholesky(params.Sigma_b)))
    del cfg
    return np.concatenate(parts)


def unpack_globals(vec, like):
    cfg = like.config
    P, G, q, dz = cfg.P, cfg.n_clusters, cfg.n_covariates, cfg.d_z
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n]
        pos += n
        return out

    Lambda = take(P * q).reshape(P, q).copy()
    beta = [take(g * dz).reshape(g, dz).copy() for g in cfg.n_subpops]
    psi = [softmax(take(g * G).reshape(g, G), axis=0) for g in cfg.n_subpops]
    amp = np.exp(take(P))
    length = np.exp(take(P))
    noise = np.exp(2.0 * take(P))
    W = np.zeros((G, q))
    W[1:] = take((G - 1) * q).reshape(G - 1, q)
    D = P * D_LINEAR
    c = _unpack_chol(take(D * (D + 1) // 2), D)
    if pos != vec.size:
        raise ValueError(f"global vector has {vec.size} entries, expected {pos}")
    return ModelParams(cfg, like.basis, Lambda, beta, psi, amp, length, noise, W, c @ c.T)


def _flatten_global_grad(params, g):
    sb_chol = np.linalg.cholesky(params.Sigma_b)
    parts = [g["Lambda"].ravel()]
    parts += [b.ravel() for b in g["beta"]]
    parts += [p.ravel() for p in g["psi"]]
    parts += [g["log_amp"], g["log_len"], g["log_sigma"]]
    parts.append(g["W"][1:].ravel())
    parts.append(_tril_vec(_tril_grad(g["Sigma_b"], sb_chol)))
    return np.concatenate(parts)


def pack_local(lv):
    parts = [np.log(lv.nu_c)]
    parts += [np.log(v) for v in lv.nu_z]
    parts += [lv.b_mean, _pack_chol(lv.b_chol)]
    for m, c in zip(lv.f_mean, lv.f_chol):
        parts += [m, _pack_chol(c)]
    return np.concatenate(parts)


def unpack_local(vec, like):
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n]
        pos += n
        return out

    nu_c = softmax(take(like.nu_c.size))
    nu_z = [softmax(take(v.size)) for v in like.nu_z]
    D = like.b_mean.size
    b_mean = take(D).copy()
    b_chol = _unpack_chol(take(D * (D + 1) // 2), D)
    f_mean, f_chol = [], []
    for m in like.f_mean:
        n = m.size
        f_mean.append(take(n).copy())
        f_chol.append(_unpack_chol(take(n * (n + 1) // 2), n))
    if pos != vec.size:
        raise ValueError(f"local vector has {vec.size} entries, expected {pos}")
    return LocalVariational(nu_c, nu_z, b_mean, b_chol, f_mean, f_chol)


def _flatten_local_grad(g):
    parts = [g["c"], *g["z"], g["b_mean"], _tril_vec(g["b_chol"])]
    for m, c in zip(g["f_mean"], g["f_chol"]):
        parts += [m, _tril_vec(c)]
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# Public ELBO interface
# --------------------------------------------------------------------------

def _check_locals(params, designs, locals_):
    if len(designs) != len(locals_):
        raise ValueError(f"{len(designs)} patients but {len(locals_)} local parameter sets")
    cfg = params.config
    for pd, lv in zip(designs, locals_):
        lv.validate(atol=1e-9)
        if lv.nu_c.size != cfg.n_clusters or len(lv.nu_z) != cfg.P or lv.b_mean.size != cfg.P * D_LINEAR:
            raise ValueError("local parameters do not match the model configuration")
        if any(m.size != n for m, n in zip(lv.f_mean, pd.n)):
            raise ValueError(f"local f dimensions do not match patient {pd.record.id}")


def patient_elbo(params, patient, local, _globals=None):
    gc = _globals or _Globals(params)
    return _patient_terms(gc, as_design(params.basis, patient), local, False)[0]


def elbo(params, patients, locals_, include_theta_prior=True):
    """Analytic evidence lower bound summed over patients (plus ``log p(Theta)``)."""
    designs = [as_design(params.basis, p) for p in patients]
    _check_locals(params, designs, locals_)
    gc = _Globals(params)
    total = sum(_patient_terms(gc, pd, lv, False)[0] for pd, lv in zip(designs, locals_))
    if include_theta_prior:
        total += theta_log_prior(params)
    return float(total)


@dataclass
class ElboGradients:
    value: float
    globals: np.ndarray
    locals: list


def elbo_gradients(params, patients, locals_, include_theta_prior=True, data_scale=1.0):
    """ELBO value and gradients in the unconstrained coordinates.

    ``data_scale`` multiplies the per-patient global terms (minibatch reweighting);
    the reported value is scaled the same way.
    """
    designs = [as_design(params.basis, p) for p in patients]
    _check_locals(params, designs, locals_)
    gc = _Globals(params)
    acc = _zero_grads(params)
    value = 0.0
    local_grads = []
    for pd, lv in zip(designs, locals_):
        v, lg, gg = _patient_terms(gc, pd, lv, True)
        value += v
        _add_grads(acc, gg)
        local_grads.append(_flatten_local_grad(lg))
    if data_scale != 1.0:
        value *= data_scale
        for key in acc:
            if isinstance(acc[key], list):
                acc[key] = [a * data_scale for a in acc[key]]
            else:
                acc[key] = acc[key] * data_scale
    if include_theta_prior:
        value += theta_log_prior(params)
        _add_grads(acc, _theta_prior_grad(params))
    return ElboGradients(float(value), _flatten_global_grad(params, acc), local_grads)


def finite_difference_check(params, patients, locals_, h=1e-5, rng=None, max_coords=None,
                            include_theta_prior=True, abs_floor=1e-4):
    """Compare analytic gradients with central differences.

    Relative error is ``|g - fd| / max(|g|, |fd|, abs_floor)``; the floor keeps
    coordinates whose gradient sits at the difference quotient's own rounding
    level (about ``eps * |ELBO| / h``) from reporting noise as error. For the
    same reason each additive term (per-patient bounds, the prior without its
    constant, and within each patient bound every additive component) is
    differenced separately, and local coordinates use only the owning
    patient's term.

    Returns a dict with the max relative error per block (``globals``,
    ``local[i]``) and overall (``max``). ``max_coords`` samples that many
    coordinates per block.
    """
    designs = [as_design(params.basis, p) for p in patients]
    grads = elbo_gradients(params, designs, locals_, include_theta_prior)
    rng = rng or np.random.default_rng(0)

    def pick(n):
        if max_coords is None or max_coords >= n:
            return np.arange(n)
        return np.sort(rng.choice(n, size=max_coords, replace=False))

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), abs_floor)

    errors = {}
    theta = pack_globals(params)
    worst = 0.0
    for k in pick(theta.size):
        diff = 0.0
        terms = []
        for s in (h, -h):
            th = theta.copy()
            th[k] += s
            par = unpack_globals(th, params)
            gc = _Globals(par)
            vals = []
            for d, lv in zip(designs, locals_):
                _patient_terms(gc, d, lv, False, parts=vals)
            if include_theta_prior:
                vals.append(theta_log_prior(par, constants=False))
            terms.append(vals)
        # summing per-term differences keeps the rounding floor at the size of each term
        diff = sum(a - b for a, b in zip(*terms))
        fd = diff / (2 * h)
        worst = max(worst, rel(grads.globals[k], fd))
    errors["globals"] = worst
    gc = _Globals(params)
    for i, lv in enumerate(locals_):
        vec = pack_local(lv)
        worst = 0.0
        for k in pick(vec.size):
            terms = []
            for s in (h, -h):
                v = vec.copy()
                v[k] += s
                vals = []
                _patient_terms(gc, designs[i], unpack_local(v, lv), False, parts=vals)
                terms.append(vals)
            fd = sum(a - b for a, b in zip(*terms)) / (2 * h)
            worst = max(worst, rel(grads.locals[i][k], fd))
        errors[f"local[{i}]"] = worst
    errors["max"] = max(errors.values())
    return errors


# --------------------------------------------------------------------------
# Local updates
# --------------------------------------------------------------------------

def init_local(params, patient, rng=None):
    """Locals at prior moments: nu_c = pi(x), nu_z = Psi nu_c, q(b) = p(b), q(f) = p(f)."""
    del rng  # initialization is deterministic
    cfg = params.config
    nu_c = softmax(params.W @ patient.x)
    nu_z = [psi @ nu_c for psi in params.Psi]
    f_mean, f_chol = [], []
    for p in range(cfg.P):
        t = patient.times[p] if isinstance(patient, PatientRecord) else patient.t[p]
        if t.size:
            _, chol = ou_cov_factor(params.kernel(p), t)
        else:
            chol = np.zeros((0, 0))
        f_mean.append(np.zeros(t.size))
        f_chol.append(chol)
    return LocalVariational(nu_c, [v / v.sum() for v in nu_z], np.zeros(cfg.P * D_LINEAR),
                            np.linalg.cholesky(params.Sigma_b), f_mean, f_chol)


class _VarCache:
    __slots__ = ("s_f", "f_chol", "gain")


def _prepare_f_blocks(gc, pd):
    """Per-variable optimal q(f) covariance and the gain mapping residuals to its mean."""
    blocks = []
    for p in range(gc.params.config.P):
        n = pd.n[p]
        if n == 0:
            blocks.append(None)
            continue
        sigma2 = gc.sigma2[p]
        k_mat, _ = ou_cov_factor(gc.kernels[p], pd.t[p])
        a_chol, _ = jittered_cholesky(k_mat + sigma2 * np.eye(n), scale=sigma2, start=0.0)
        a_inv = chol_inverse(a_chol)
        blk = _VarCache()
        # S_f = (K^-1 + I / s2)^-1 = s2 (I - s2 (K + s2 I)^-1); mean = S_f r / s2
        s_f = sigma2 * (np.eye(n) - sigma2 * a_inv)
        s_f = 0.5 * (s_f + s_f.T)
        blk.s_f = s_f
        blk.f_chol, _ = jittered_cholesky(s_f, scale=sigma2, start=0.0)
        blk.gain = np.eye(n) - sigma2 * a_inv
        blocks.append(blk)
    return blocks


def _cavi_sweep(gc, pd, lv, blocks):
    params = gc.params
    cfg = params.config
    x = pd.x
    offsets = [params.Lambda[p] @ x for p in range(cfg.P)]
    curves = [pd.Z[p] @ params.beta[p].T if pd.n[p] else None for p in range(cfg.P)]
    # q(f_p)
    for p in range(cfg.P):
        if pd.n[p] == 0:
            continue
        r = pd.y[p] - offsets[p] - curves[p] @ lv.nu_z[p] - pd.L[p] @ lv.b_mean[_bs(p)]
        lv.f_mean[p] = blocks[p].gain @ r
        lv.f_chol[p] = blocks[p].f_chol
    # q(b)
    prec = gc.sb_inv.copy()
    h = np.zeros(cfg.P * D_LINEAR)
    for p in range(cfg.P):
        if pd.n[p] == 0:
            continue
        s2 = gc.sigma2[p]
        Lm = pd.L[p]
        r = pd.y[p] - offsets[p] - curves[p] @ lv.nu_z[p] - lv.f_mean[p]
        prec[_bs(p), _bs(p)] += Lm.T @ Lm / s2
        h[_bs(p)] += Lm.T @ r / s2
    prec_chol = np.linalg.cholesky(0.5 * (prec + prec.T))
    s_b = chol_inverse(prec_chol)
    lv.b_mean = cho_solve((prec_chol, True), h)
    lv.b_chol = np.linalg.cholesky(0.5 * (s_b + s_b.T))
    # q(z_p)
    for p in range(cfg.P):
        logits = gc.log_psi[p] @ lv.nu_c
        if pd.n[p]:
            base = pd.y[p] - offsets[p] - pd.L[p] @ lv.b_mean[_bs(p)] - lv.f_mean[p]
            ss, _ = _kernels.residual_sums(base, curves[p], lv.nu_z[p])
            logits = logits - 0.5 * ss / gc.sigma2[p]
        lv.nu_z[p] = _normalize_logits(logits)
    # q(c)
    logits = log_softmax(params.W @ x)
    for p in range(cfg.P):
        logits = logits + gc.log_psi[p].T @ lv.nu_z[p]
    lv.nu_c = _normalize_logits(logits)
    return lv


def _max_change(a, b):
    diffs = [np.max(np.abs(a.nu_c - b.nu_c)), np.max(np.abs(a.b_mean - b.b_mean))]
    diffs += [np.max(np.abs(u - v)) for u, v in zip(a.nu_z, b.nu_z)]
    diffs += [np.max(np.abs(u - v)) for u, v in zip(a.f_mean, b.f_mean) if u.size]
    return max(diffs)


def _collapsed_start(gc, pd, lv):
    """Discrete factors from collapsed responsibilities, continuous factors copied.

    ``q(z_p)`` is set proportional to ``exp(log Psi_p nu_c) N(y_p | curve_g, L S_b L^T + K + s2 I)``,
    i.e. b and f integrated out per variable, then ``q(c)`` takes its exact update.
    """
    params = gc.params
    cfg = params.config
    out = lv.copy()
    for p in range(cfg.P):
        logits = gc.log_psi[p] @ out.nu_c
        n = pd.n[p]
        if n:
            lin = pd.L[p]
            k_mat, _ = ou_cov_factor(gc.kernels[p], pd.t[p])
            cov = lin @ params.Sigma_b[_bs(p), _bs(p)] @ lin.T + k_mat + gc.sigma2[p] * np.eye(n)
            chol, _ = jittered_cholesky(cov, scale=gc.sigma2[p], start=0.0)
            resid = (pd.y[p] - params.Lambda[p] @ pd.x)[:, None] - pd.Z[p] @ params.beta[p].T
            alpha = solve_triangular(chol, resid, lower=True)
            logits = logits - 0.5 * np.sum(alpha**2, axis=0)
        out.nu_z[p] = _normalize_logits(logits)
    logits = log_softmax(params.W @ pd.x)
    for p in range(cfg.P):
        logits = logits + gc.log_psi[p].T @ out.nu_z[p]
    out.nu_c = _normalize_logits(logits)
    return out


def _run_cavi(gc, pd, start, blocks, iters, tol):
    current = start.copy()
    for _ in range(iters):
        prev = current.copy()
        try:
            current = _cavi_sweep(gc, pd, current, blocks)
        except (FactorizationError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"local update for patient {pd.record.id} failed: {exc}", RuntimeWarning)
            return prev
        if tol is not None and _max_change(prev, current) < tol:
            break
    return current


def local_update(params, patient, local, iters, tol=None, _globals=None, restart=False):
    """Coordinate-ascent refinement of one patient's locals with Theta held fixed.

    Each block (f_p, b, z_p, c) moves to its exact conditional optimum, so the
    per-patient bound is non-decreasing. Stops early when ``tol`` is given and
    the largest parameter change falls below it. On a numerical failure the
    best iterate so far is returned with a warning.

    With ``restart`` a second run starts from collapsed subpopulation
    responsibilities (see ``_collapsed_start``) and the run with the higher
    bound is kept; this escapes the fixed point where b and f absorb the gap
    to a wrong subpopulation curve.
    """
    if iters <= 0:
        return local
    gc = _globals or _Globals(params)
    pd = as_design(params.basis, patient)
    try:
        blocks = _prepare_f_blocks(gc, pd)
    except (FactorizationError, np.linalg.LinAlgError) as exc:
        warnings.warn(f"local update for patient {pd.record.id} failed: {exc}", RuntimeWarning)
        return local.copy()
    current = _run_cavi(gc, pd, local, blocks, iters, tol)
    if not restart or not any(pd.n):
        return current
    try:
        other = _run_cavi(gc, pd, _collapsed_start(gc, pd, local), blocks, iters, tol)
    except (FactorizationError, np.linalg.LinAlgError):
        return current
    if _patient_terms(gc, pd, other, False)[0] > _patient_terms(gc, pd, current, False)[0]:
        return other
    return current


# --------------------------------------------------------------------------
# Global updates and training loop
# --------------------------------------------------------------------------

def global_update(params, batch, state, n_total, include_theta_prior=True):
    """One RMSProp ascent step on Theta from a minibatch of (patient, local) pairs.

    Per-patient terms are reweighted by ``n_total / len(batch)`` so the
    gradient is unbiased for the full-data ELBO; the ``p(Theta)`` gradient is
    added once. Returns the updated parameters and the (mutated) state.
    """
    if not batch:
        raise ValueError("global update needs a nonempty batch")
    patients = [b[0] for b in batch]
    locals_ = [b[1] for b in batch]
    grads = elbo_gradients(params, patients, locals_, include_theta_prior,
                           data_scale=n_total / len(batch))
    theta = pack_globals(params)
    new = unpack_globals(state.step(theta, grads.globals), params)
    return new, state


def _standardization(patients, P):
    centers, scales = np.zeros(P), np.ones(P)
    for p in range(P):
        vals = np.concatenate([pt.values[p] for pt in patients] + [np.zeros(0)])
        if vals.size:
            centers[p] = vals.mean()
            sd = vals.std()
            scales[p] = sd if sd > 0 and np.isfinite(sd) else 1.0
    return centers, scales


def _standardize_patients(patients, centers, scales):
    return [PatientRecord(pt.id, pt.x, pt.times,
                          [(v - centers[p]) / scales[p] for p, v in enumerate(pt.values)], pt.meta)
            for pt in patients]


def _rescale_params(params, centers, scales, shift_intercept):
    out = params.copy()
    for p in range(params.config.P):
        out.Lambda[p] *= scales[p]
        if shift_intercept:
            out.Lambda[p, 0] += centers[p]
        out.beta[p] *= scales[p]
        out.amplitude[p] *= scales[p]
        out.noise_var[p] *= scales[p] ** 2
    s = np.repeat(scales, D_LINEAR)
    out.Sigma_b = params.Sigma_b * np.outer(s, s)
    return out


def _rescale_local(lv, scales):
    s = np.repeat(scales, D_LINEAR)
    return LocalVariational(lv.nu_c.copy(), [v.copy() for v in lv.nu_z], lv.b_mean * s,
                            lv.b_chol * s[:, None], [m * scales[p] for p, m in enumerate(lv.f_mean)],
                            [c * scales[p] for p, c in enumerate(lv.f_chol)])


def training_basis(patients, config):
    """Spline basis spanning the observed time range of a training cohort."""
    times = np.concatenate([t for pt in patients for t in pt.times] + [np.zeros(0)])
    if times.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(times.min()), float(times.max())
        if hi - lo < 1e-6:
            hi = lo + 1.0
    return SplineBasis.evenly_spaced(lo, hi, config.n_interior_knots, config.spline_degree)


def initial_params(patients, config, basis, rng, scheme="kmeans"):
    """Data-driven starting point for Theta (expects standardized values)."""
    from mvlong.initialization import kmeans_init
    return kmeans_init(patients, config, basis, rng, scheme=scheme)


def _sweep(params, designs, locals_, indices, iters, tol=None, restart=False):
    gc = _Globals(params)
    for i in indices:
        locals_[i] = local_update(params, designs[i], locals_[i], iters, tol=tol, _globals=gc, restart=restart)


def fit(dataset, config, options=None, rng=None, init_params=None, trace_path=None, callback=None):
    """Fit Theta and per-patient locals.

    Each step refreshes the locals of a minibatch by coordinate ascent, then
    takes an RMSProp step on Theta. After every epoch the full-data bound
    (on a fixed evaluation subsample when the cohort is large) is appended to
    the trace; training stops after ``max_epochs`` or when the relative
    change across ``window`` epochs drops below ``tol``.
    """
    options = options or FitOptions()
    rng = rng if rng is not None else np.random.default_rng(options.seed)
    patients = list(getattr(dataset, "patients", dataset))
    if not patients:
        raise ValueError("cannot fit an empty dataset")
    P = config.P
    if any(pt.n_vars != P for pt in patients):
        raise ValueError("every patient must carry one sequence per model variable")
    if any(pt.x.size != config.n_covariates for pt in patients):
        raise ValueError("covariate dimension does not match the configuration")

    if options.standardize:
        centers, scales = _standardization(patients, P)
    else:
        centers, scales = np.zeros(P), np.ones(P)
    shift_intercept = all(pt.x[0] == 1.0 for pt in patients)
    if not shift_intercept:
        centers = np.zeros(P)
    work = _standardize_patients(patients, centers, scales)
    log_jacobian = -float(sum(pt.n_obs @ np.log(scales) for pt in patients))

    if init_params is None:
        basis = training_basis(patients, config)
        params = initial_params(work, config, basis, rng, scheme=options.init)
    else:
        params = _rescale_params(init_params, -centers / scales, 1.0 / scales, shift_intercept)
        basis = params.basis
    designs = [PatientDesign(basis, pt) for pt in work]
    locals_ = [init_local(params, pd) for pd in designs]

    N = len(designs)
    state = OptimizerState(options.decay, options.learning_rate, options.eps)
    if N > options.eval_subsample:
        eval_idx = np.sort(rng.choice(N, size=options.eval_subsample, replace=False))
        eval_scale = N / options.eval_subsample
    else:
        eval_idx = np.arange(N)
        eval_scale = 1.0

    def full_bound(par):
        gc = _Globals(par)
        val = sum(_patient_terms(gc, designs[i], locals_[i], False)[0] for i in eval_idx) * eval_scale
        if options.include_theta_prior:
            val += theta_log_prior(par)
        return float(val) + log_jacobian

    trace = []
    t0 = time.perf_counter()
    step = 0
    writer = fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "elbo_estimate", "wall_time_seconds"])
    try:
        for epoch in range(1, options.max_epochs + 1):
            # step size eta / (1 + lr_decay (epoch - 1)); constant when lr_decay is 0
            state.learning_rate = options.learning_rate / (1.0 + options.lr_decay * (epoch - 1))
            order = rng.permutation(N)
            for start in range(0, N, options.batch_size):
                idx = order[start:start + options.batch_size]
                try:
                    restart = options.restart_every > 0 and (epoch - 1) % options.restart_every == 0
                    _sweep(params, designs, locals_, idx, options.local_iters, restart=restart)
                    params, state = global_update(params, [(designs[i], locals_[i]) for i in idx],
                                                  state, N, options.include_theta_prior)
                except (FactorizationError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    raise RuntimeError(f"numerical failure at epoch {epoch}, step {step}: {exc}") from exc
                step += 1
            bound = full_bound(params)
            if not np.isfinite(bound):
                raise RuntimeError(f"non-finite ELBO at epoch {epoch}, step {step}")
            row = (epoch, step, bound, time.perf_counter() - t0)
            trace.append(row)
            if writer is not None:
                writer.writerow([epoch, step, repr(bound), f"{row[3]:.3f}"])
            log.debug("epoch %d step %d elbo %.6f", epoch, step, bound)
            if callback is not None:
                callback(epoch, _rescale_params(params, centers, scales, shift_intercept))
            if options.checkpoint_every and options.checkpoint_dir and epoch % options.checkpoint_every == 0:
                from mvlong.model import save_snapshot
                save_snapshot(_rescale_params(params, centers, scales, shift_intercept),
                              f"{options.checkpoint_dir}/checkpoint_epoch{epoch:04d}.json")
            if len(trace) > options.window:
                old = trace[-1 - options.window][2]
                if abs(bound - old) / max(abs(bound), 1e-300) < options.tol:
                    break
    finally:
        if fh is not None:
            fh.close()

    final = _rescale_params(params, centers, scales, shift_intercept).validate(atol=1e-8)
    out_locals = [_rescale_local(lv, scales) for lv in locals_]
    return FitResult(final, out_locals, trace)
