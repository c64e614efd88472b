"""Starting values for Theta.

Subpopulation curves come from k-means over ridge-smoothed individual spline
fits; cluster profiles ``Psi`` come from k-means over the resulting one-hot
subpopulation labels, which breaks the label symmetry that a uniform ``Psi``
would never leave under gradient ascent.
"""
import numpy as np
from scipy.cluster.vq import kmeans, vq

from mvlong.core import bspline_design
from mvlong.model import D_LINEAR, ModelParams

RIDGE = 1.0
MIN_OBS = 3
HARD_ITERS = 10
KMEANS_RESTARTS = 10


def _kmeans(data, k, rng):
    """Best of ``KMEANS_RESTARTS`` Lloyd runs by distortion."""
    seed = int(rng.integers(2**31 - 1))
    codebook, _ = kmeans(data, k, iter=KMEANS_RESTARTS, seed=seed)
    labels, _ = vq(data, codebook)
    return codebook, labels


def _curve_init(patients, p, basis, n_groups, rng):
    Z_all = [bspline_design(basis, pt.times[p]) for pt in patients]
    y_all = [pt.values[p] for pt in patients]
    Z = np.vstack(Z_all)
    y = np.concatenate(y_all)
    d = basis.dim
    beta_pop = np.linalg.solve(Z.T @ Z + RIDGE * np.eye(d), Z.T @ y)
    resid_var = float(np.var(y - Z @ beta_pop)) if y.size > 1 else 1.0
    labels = np.full(len(patients), -1)
    rows = [i for i, pt in enumerate(patients) if pt.times[p].size >= MIN_OBS]
    if len(rows) < 2 * n_groups:
        beta = beta_pop[None, :] + 0.1 * rng.standard_normal((n_groups, d))
        return beta, labels, resid_var
    indiv = np.array([
        np.linalg.solve(Z_all[i].T @ Z_all[i] + RIDGE * np.eye(d),
                        Z_all[i].T @ y_all[i] + RIDGE * beta_pop)
        for i in rows
    ])
    grid = bspline_design(basis, np.linspace(*basis.boundary, 50))
    curves = indiv @ grid.T
    _, lab = _kmeans(curves, n_groups, rng)
    # the ridge fits are shrunk toward the population curve, so the group
    # curves are refit on pooled raw data and refined by hard reassignment
    gram = np.array([Z_all[i].T @ Z_all[i] for i in rows])
    rhs = np.array([Z_all[i].T @ y_all[i] for i in rows])
    beta = np.empty((n_groups, d))
    for _ in range(HARD_ITERS):
        for g in range(n_groups):
            m = lab == g
            if not m.any():
                beta[g] = beta_pop + 0.1 * rng.standard_normal(d)
                continue
            beta[g] = np.linalg.solve(gram[m].sum(axis=0) + 1e-6 * np.eye(d), rhs[m].sum(axis=0) + 1e-6 * beta_pop)
        sse = np.array([[np.sum((y_all[i] - Z_all[i] @ bg) ** 2) for bg in beta] for i in rows])
        new = np.argmin(sse, axis=1)
        if np.array_equal(new, lab):
            break
        lab = new
    labels[rows] = lab
    resid = np.concatenate([y_all[i] - Z_all[i] @ beta[lab[j]] for j, i in enumerate(rows)])
    resid_var = float(np.var(resid)) if resid.size > 1 else resid_var
    return beta, labels, resid_var


def kmeans_init(patients, config, basis, rng, scheme="kmeans"):
    P, G, q = config.P, config.n_clusters, config.n_covariates
    beta, labels, resid = [], [], []
    for p in range(P):
        Gp = config.n_subpops[p]
        if scheme == "kmeans":
            b, lab, rv = _curve_init(patients, p, basis, Gp, rng)
        else:
            vals = np.concatenate([pt.values[p] for pt in patients] + [np.zeros(0)])
            b = 0.5 * rng.standard_normal((Gp, basis.dim)) + (vals.mean() if vals.size else 0.0)
            lab = np.full(len(patients), -1)
            rv = float(vals.var()) if vals.size > 1 else 1.0
        beta.append(b)
        labels.append(lab)
        resid.append(max(rv, 1e-4))

    psi = []
    onehot = []
    for p in range(P):
        Gp = config.n_subpops[p]
        block = np.full((len(patients), Gp), 1.0 / Gp)
        seen = labels[p] >= 0
        block[seen] = np.eye(Gp)[labels[p][seen]]
        onehot.append(block)
    if scheme == "kmeans" and G > 1 and len(patients) >= 2 * G:
        _, c_lab = _kmeans(np.hstack(onehot), G, rng)
        for p in range(P):
            Gp = config.n_subpops[p]
            counts = np.ones((Gp, G))
            for g in range(G):
                counts[:, g] += onehot[p][c_lab == g].sum(axis=0)
            psi.append(counts / counts.sum(axis=0, keepdims=True))
    else:
        for p in range(P):
            Gp = config.n_subpops[p]
            noise = np.exp(0.1 * rng.standard_normal((Gp, G)))
            psi.append(noise / noise.sum(axis=0, keepdims=True))

    resid = np.array(resid)
    return ModelParams(
        config=config,
        basis=basis,
        Lambda=np.zeros((P, q)),
        beta=beta,
        Psi=psi,
        amplitude=np.sqrt(resid / 2.0),
        lengthscale=np.ones(P),
        noise_var=resid / 2.0,
        W=np.zeros((G, q)),
        Sigma_b=0.1 * np.eye(P * D_LINEAR),
    ).validate()
