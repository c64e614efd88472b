import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from mvlong.core import OUKernelParams, SplineBasis, bspline_design, linear_design, ou_kernel_matrix
from mvlong.model import (
    D_LINEAR,
    LatentState,
    ModelConfig,
    ModelParams,
    PatientRecord,
    cluster_prior,
    exact_log_evidence,
    joint_log_density,
    load_snapshot,
    mean_function,
    random_params,
    sample_patient,
    save_snapshot,
    subpop_conditional,
)


def small_config(P=2, G=2, Gp=2, q=2, **kw):
    return ModelConfig(variables=[f"v{p}" for p in range(P)], n_clusters=G, n_subpops=Gp, n_covariates=q, **kw)


def random_patient(params, rng, max_obs=3):
    cfg = params.config
    x = np.r_[1.0, rng.standard_normal(cfg.n_covariates - 1)]
    times = [np.sort(rng.uniform(0, 10, rng.integers(0, max_obs + 1))) for _ in range(cfg.P)]
    return sample_patient(params, x, times, rng)


# ---- containers ------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = ModelConfig(variables=["a", "b"])
    assert cfg.n_clusters == 6 and cfg.n_subpops == (4, 4)
    assert cfg.d_z == 12 and cfg.d_l == D_LINEAR == 2
    with pytest.raises(ValueError):
        ModelConfig(variables=[])
    with pytest.raises(ValueError):
        ModelConfig(variables=["a"], n_clusters=0)
    with pytest.raises(ValueError):
        ModelConfig(variables=["a", "b"], n_subpops=[2])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_params_validation_catches_bad_values():
    rng = np.random.default_rng(0)
    params = random_params(small_config(), rng)
    params.validate()
    bad = params.copy()
    bad.W[0, 1] = 0.5
    with pytest.raises(ValueError):
        bad.validate()
    bad = params.copy()
    bad.Psi[0][:, 0] = [0.7, 0.7]
    with pytest.raises(ValueError):
        bad.validate()
    bad = params.copy()
    bad.Sigma_b = -np.eye(4)
    with pytest.raises(ValueError):
        bad.validate()
    bad = params.copy()
    bad.noise_var[0] = 0.0
    with pytest.raises(ValueError):
        bad.validate()


def test_patient_record_validation():
    with pytest.raises(ValueError):
        PatientRecord("a", [1.0], [[2.0, 1.0]], [[0.0, 0.0]])
    with pytest.raises(ValueError):
        PatientRecord("a", [1.0], [[1.0]], [[np.nan]])
    with pytest.raises(ValueError):
        PatientRecord("a", [1.0], [[1.0, 2.0]], [[0.0]])
    pt = PatientRecord("a", [1.0, 2.0], [[1.0], []], [[3.0], []])
    np.testing.assert_array_equal(pt.n_obs, [1, 0])
    again = PatientRecord.from_dict(pt.to_dict())
    assert again.id == "a" and again.n_obs.tolist() == [1, 0]


# ---- mean function and priors ---------------------------------------------

def test_mean_function_zero_and_constant():
    cfg = small_config(q=1)
    params = random_params(cfg, np.random.default_rng(1))
    params.Lambda[:] = 0.0
    params.beta = [np.zeros_like(b) for b in params.beta]
    t = np.array([0.5, 3.0, 7.0])
    np.testing.assert_array_equal(mean_function(params, [1.0], 0, [0, 0], None, t, 0), 0.0)
    np.testing.assert_allclose(mean_function(params, [1.0], 1, [2.5, 0], None, t, 1), 2.5)


def test_mean_function_sum_of_terms():
    rng = np.random.default_rng(2)
    params = random_params(small_config(q=3), rng)
    x, t = np.r_[1.0, rng.standard_normal(2)], np.sort(rng.uniform(0, 10, 5))
    b, f = rng.standard_normal(2), rng.standard_normal(5)
    phi = bspline_design(params.basis, t)
    expected = params.Lambda[1] @ x + phi @ params.beta[1][0] + b[0] + b[1] * t + f
    np.testing.assert_allclose(mean_function(params, x, 0, b, f, t, 1), expected)
    with pytest.raises(IndexError):
        mean_function(params, x, 5, b, f, t, 1)


def test_cluster_prior_cases():
    params = random_params(small_config(q=1), np.random.default_rng(3))
    params.W[:] = 0.0
    np.testing.assert_allclose(cluster_prior(params, [1.0]), [0.5, 0.5])
    params.W[1, 0] = np.log(3.0)
    np.testing.assert_allclose(cluster_prior(params, [1.0]), [0.25, 0.75])


def test_subpop_conditional():
    params = random_params(small_config(), np.random.default_rng(4))
    params.Psi[0] = np.array([[0.3, 1.0], [0.7, 0.0]])
    np.testing.assert_array_equal(subpop_conditional(params, 0, 0), [0.3, 0.7])
    with pytest.raises(IndexError):
        subpop_conditional(params, 0, 2)


# ---- joint density ---------------------------------------------------------

def _joint_reference(params, pt, lat):
    """Term-by-term recomputation with scipy densities."""
    cfg = params.config
    val = np.log(cluster_prior(params, pt.x)[lat.c])
    val += stats.multivariate_normal(np.zeros(cfg.P * 2), params.Sigma_b).logpdf(lat.b)
    for p in range(cfg.P):
        val += np.log(params.Psi[p][lat.z[p], lat.c])
        t = pt.times[p]
        if t.size == 0:
            continue
        k = ou_kernel_matrix(params.kernel(p), t) + 1e-8 * params.amplitude[p] ** 2 * np.eye(t.size)
        val += stats.multivariate_normal(np.zeros(t.size), k).logpdf(lat.f[p])
        mu = (params.Lambda[p] @ pt.x + bspline_design(params.basis, t) @ params.beta[p][lat.z[p]]
              + linear_design(t) @ lat.b[2 * p:2 * p + 2] + lat.f[p])
        val += stats.norm(mu, np.sqrt(params.noise_var[p])).logpdf(pt.values[p]).sum()
    return val


def test_joint_density_matches_reference():
    rng = np.random.default_rng(5)
    for _ in range(10):
        params = random_params(small_config(P=3, G=3, Gp=2, q=2), rng)
        pt, lat = random_patient(params, rng, max_obs=4)
        assert joint_log_density(params, pt, lat) == pytest.approx(_joint_reference(params, pt, lat), rel=1e-10)


def test_joint_density_prior_only_when_unobserved():
    rng = np.random.default_rng(6)
    params = random_params(small_config(), rng)
    pt, lat = sample_patient(params, [1.0, 0.3], [[], []], rng)
    expected = (np.log(cluster_prior(params, pt.x)[lat.c])
                + stats.multivariate_normal(np.zeros(4), params.Sigma_b).logpdf(lat.b)
                + sum(np.log(params.Psi[p][lat.z[p], lat.c]) for p in range(2)))
    assert joint_log_density(params, pt, lat) == pytest.approx(expected, rel=1e-12)


def test_doubling_noise_far_from_data():
    rng = np.random.default_rng(7)
    params = random_params(small_config(P=1, G=1, Gp=1, q=1), rng)
    pt, lat = sample_patient(params, [1.0], [[1.0, 4.0, 8.0]], rng)
    lat.f[0] = lat.f[0].copy()
    mu = mean_function(params, pt.x, lat.z[0], lat.b[:2], lat.f[0], pt.times[0], 0)
    far = PatientRecord("far", pt.x, pt.times, [mu + 50.0])
    s2 = params.noise_var[0]
    doubled = params.copy()
    doubled.noise_var = params.noise_var * 4.0  # doubling sigma
    diff = joint_log_density(doubled, far, lat) - joint_log_density(params, far, lat)
    n, ss = 3, 3 * 50.0**2
    expected = -n * np.log(2.0) - 0.5 * ss / (4 * s2) + 0.5 * ss / s2
    assert diff == pytest.approx(expected, rel=1e-10)


def test_joint_density_dimension_mismatch():
    rng = np.random.default_rng(8)
    params = random_params(small_config(), rng)
    pt, lat = random_patient(params, rng)
    with pytest.raises(ValueError):
        joint_log_density(params, pt, LatentState(lat.c, lat.z, lat.b[:2], lat.f))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_sample_then_density_finite(seed):
    rng = np.random.default_rng(seed)
    params = random_params(small_config(P=2, G=3, Gp=3, q=2), rng)
    pt, lat = random_patient(params, rng, max_obs=6)
    assert np.isfinite(joint_log_density(params, pt, lat))


# ---- sampling --------------------------------------------------------------

def test_sample_degenerate_noise_reproduces_curve():
    rng = np.random.default_rng(9)
    params = random_params(small_config(q=2), rng)
    params.noise_var = np.full(2, 1e-300)
    params.amplitude = np.full(2, 1e-150)
    params.Sigma_b = 1e-300 * np.eye(4)
    x = np.array([1.0, 0.5])
    times = [np.array([1.0, 2.0]), np.array([3.0])]
    pt, lat = sample_patient(params, x, times, rng)
    for p in range(2):
        expected = params.Lambda[p] @ x + bspline_design(params.basis, times[p]) @ params.beta[p][lat.z[p]]
        np.testing.assert_allclose(pt.values[p], expected, atol=1e-12)


def test_sample_cluster_frequencies():
    rng = np.random.default_rng(10)
    params = random_params(small_config(P=1, G=3, Gp=1, q=2), rng)
    x = np.array([1.0, 0.4])
    pi = cluster_prior(params, x)
    n = 100_000
    draws = np.array([sample_patient(params, x, [[]], rng)[1].c for _ in range(n)])
    freq = np.bincount(draws, minlength=3) / n
    se = np.sqrt(pi * (1 - pi) / n)
    assert np.all(np.abs(freq - pi) < 3 * se + 1e-12)


def test_sample_reproducible():
    params = random_params(small_config(), np.random.default_rng(11))
    a = sample_patient(params, [1.0, 0.0], [[1.0, 2.0], [3.0]], np.random.default_rng(4))
    b = sample_patient(params, [1.0, 0.0], [[1.0, 2.0], [3.0]], np.random.default_rng(4))
    for p in range(2):
        np.testing.assert_array_equal(a[0].values[p], b[0].values[p])


# ---- exact evidence --------------------------------------------------------

def test_evidence_single_gaussian_case():
    rng = np.random.default_rng(12)
    params = random_params(small_config(P=1, G=1, Gp=1, q=1), rng)
    pt, _ = sample_patient(params, [1.0], [[0.5, 1.5, 6.0]], rng)
    t = pt.times[0]
    mean = params.Lambda[0, 0] + bspline_design(params.basis, t) @ params.beta[0][0]
    lin = linear_design(t)
    k = ou_kernel_matrix(params.kernel(0), t) + 1e-8 * params.amplitude[0] ** 2 * np.eye(3)
    cov = lin @ params.Sigma_b @ lin.T + k + params.noise_var[0] * np.eye(3)
    ref = stats.multivariate_normal(mean, cov).logpdf(pt.values[0])
    assert exact_log_evidence(params, pt) == pytest.approx(ref, abs=1e-8)


def test_evidence_independent_of_w_when_psi_columns_equal():
    rng = np.random.default_rng(13)
    params = random_params(small_config(G=2, Gp=3), rng)
    params.Psi = [np.tile(rng.dirichlet(np.ones(3))[:, None], (1, 2)) for _ in range(2)]
    pt, _ = random_patient(params, rng)
    other = params.copy()
    other.W[1] = rng.standard_normal(2) * 3
    assert exact_log_evidence(params, pt) == pytest.approx(exact_log_evidence(other, pt), abs=1e-10)


def test_evidence_label_permutation_invariance():
    rng = np.random.default_rng(14)
    params = random_params(small_config(G=3, Gp=2, q=2), rng)
    pt, _ = random_patient(params, rng)
    perm = np.array([0, 2, 1])
    other = params.copy()
    other.Psi = [psi[:, perm] for psi in params.Psi]
    other.W = params.W[perm]
    sub = np.array([1, 0])
    other.Psi = [psi[sub] for psi in other.Psi]
    other.beta = [b[sub] for b in params.beta]
    assert exact_log_evidence(params, pt) == pytest.approx(exact_log_evidence(other, pt), abs=1e-10)


def test_evidence_matches_monte_carlo():
    """Rao-Blackwellized prior MC: draw (c, z, b), integrate f and noise exactly."""
    rng = np.random.default_rng(15)
    cfg = small_config(P=2, G=2, Gp=2, q=2)
    params = random_params(cfg, rng, noise_sd=1.0)
    pt, _ = sample_patient(params, [1.0, 0.3], [[1.0, 4.0], [2.0, 6.5]], rng)
    S = 1_000_000
    mc = np.random.default_rng(16)
    pi = cluster_prior(params, pt.x)
    c = mc.choice(2, size=S, p=pi)
    b = mc.multivariate_normal(np.zeros(4), params.Sigma_b, size=S)
    logw = np.zeros(S)
    for p in range(2):
        u = mc.random(S)
        z = (u > params.Psi[p][0, c]).astype(int)
        t = pt.times[p]
        k = ou_kernel_matrix(params.kernel(p), t) + (1e-8 * params.amplitude[p] ** 2
                                                     + params.noise_var[p]) * np.eye(t.size)
        curves = params.Lambda[p] @ pt.x + bspline_design(params.basis, t) @ params.beta[p].T
        mean = curves[:, z].T + b[:, 2 * p:2 * p + 2] @ linear_design(t).T
        logw += stats.multivariate_normal(np.zeros(t.size), k).logpdf(pt.values[p] - mean)
    est = logsumexp(logw) - np.log(S)
    w = np.exp(logw - logw.max())
    se = w.std() / np.sqrt(S) / w.mean()  # delta-method SE on the log scale
    assert abs(est - exact_log_evidence(params, pt)) < 3 * se + 1e-9


def test_evidence_size_guard():
    params = random_params(small_config(P=2, G=2, Gp=2), np.random.default_rng(17))
    pt, _ = random_patient(params, np.random.default_rng(18))
    with pytest.raises(ValueError):
        exact_log_evidence(params, pt, max_configs=3)


def test_evidence_brute_force_enumeration():
    rng = np.random.default_rng(19)
    params = random_params(small_config(P=2, G=2, Gp=2), rng)
    pt, _ = random_patient(params, rng, max_obs=3)
    from mvlong.model import marginal_covariance
    cov = marginal_covariance(params, pt)
    y = np.concatenate(pt.values)
    terms = []
    pi = cluster_prior(params, pt.x)
    for c, z0, z1 in itertools.product(range(2), range(2), range(2)):
        mean = np.concatenate([
            params.Lambda[p] @ pt.x + bspline_design(params.basis, pt.times[p]) @ params.beta[p][z]
            for p, z in ((0, z0), (1, z1))])
        ll = stats.multivariate_normal(mean, cov).logpdf(y) if y.size else 0.0
        terms.append(np.log(pi[c] * params.Psi[0][z0, c] * params.Psi[1][z1, c]) + ll)
    assert exact_log_evidence(params, pt) == pytest.approx(logsumexp(terms), abs=1e-9)


# ---- snapshots -------------------------------------------------------------

def test_snapshot_round_trip(tmp_path):
    params = random_params(small_config(P=3, G=2, Gp=[2, 3, 1]), np.random.default_rng(20))
    path = tmp_path / "snap.json"
    save_snapshot(params, path, {"note": "x"})
    loaded, meta = load_snapshot(path)
    assert meta == {"note": "x"}
    assert loaded.config == params.config
    assert loaded.basis == params.basis
    np.testing.assert_array_equal(loaded.Sigma_b, params.Sigma_b)
    for a, b in zip(loaded.beta, params.beta):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(loaded.Psi, params.Psi):
        np.testing.assert_array_equal(a, b)


def test_snapshot_version_required(tmp_path):
    import json
    params = random_params(small_config(), np.random.default_rng(21))
    path = tmp_path / "snap.json"
    save_snapshot(params, path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_snapshot(path)


def test_params_from_explicit_arrays():
    basis = SplineBasis.evenly_spaced(0.0, 1.0, 2, 3)
    cfg = ModelConfig(variables=["a"], n_clusters=1, n_subpops=1, n_covariates=1, n_interior_knots=2)
    params = ModelParams(cfg, basis, np.zeros((1, 1)), [np.zeros((1, 6))], [np.ones((1, 1))],
                         np.ones(1), np.ones(1), np.ones(1), np.zeros((1, 1)), np.eye(2)).validate()
    assert params.kernel(0) == OUKernelParams(1.0, 1.0)
