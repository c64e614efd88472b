"""Shared numerical primitives: spline bases, OU covariance, Gaussians, softmax."""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from mvlong import _kernels

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_START = 1e-8
JITTER_MAX = 1e-2


class ParameterError(ValueError):
    """Raised for invalid model or kernel parameters."""


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a covariance cannot be factorized even after jitter escalation."""


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis over ``[t_lo, t_hi]``.

    Times outside the boundary are clamped onto it before evaluation.
    """

    degree: int
    interior_knots: tuple
    boundary: tuple

    def __post_init__(self):
        lo, hi = (float(b) for b in self.boundary)
        if not np.isfinite(lo) or not np.isfinite(hi) or not lo < hi:
            raise ParameterError(f"invalid spline boundary {self.boundary!r}")
        knots = tuple(float(k) for k in self.interior_knots)
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ParameterError("interior knots must be strictly ascending")
        if knots and (knots[0] <= lo or knots[-1] >= hi):
            raise ParameterError("interior knots must lie strictly inside the boundary")
        if self.degree < 0:
            raise ParameterError("spline degree must be nonnegative")
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "boundary", (lo, hi))

    @classmethod
    def evenly_spaced(cls, t_lo, t_hi, n_interior=8, degree=3):
        inner = np.linspace(t_lo, t_hi, n_interior + 2)[1:-1]
        return cls(degree=degree, interior_knots=tuple(inner), boundary=(t_lo, t_hi))

    @property
    def dim(self):
        return len(self.interior_knots) + self.degree + 1

    @property
    def knot_vector(self):
        lo, hi = self.boundary
        reps = self.degree + 1
        return np.concatenate([np.full(reps, lo), self.interior_knots, np.full(reps, hi)])


@dataclass(frozen=True)
class OUKernelParams:
    amplitude: float
    lengthscale: float

    def __post_init__(self):
        if not (self.amplitude > 0 and self.lengthscale > 0):
            raise ParameterError(
                f"OU kernel needs positive amplitude and lengthscale, got "
                f"a={self.amplitude}, l={self.lengthscale}"
            )


@dataclass
class GaussianDist:
    """Multivariate normal stored as mean and lower Cholesky factor."""

    mean: np.ndarray
    chol: np.ndarray

    @property
    def cov(self):
        return self.chol @ self.chol.T

    @property
    def dim(self):
        return self.mean.shape[0]


def _check_finite(times):
    times = np.asarray(times, dtype=float).reshape(-1)
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")
    return times


def bspline_design(basis, times):
    """Rows of the B-spline design matrix, one per time (clamped to the boundary)."""
    times = _check_finite(times)
    lo, hi = basis.boundary
    return _kernels.bspline_basis(basis.knot_vector, basis.degree, np.clip(times, lo, hi))


def linear_design(times):
    times = _check_finite(times)
    return np.column_stack([np.ones_like(times), times])


def ou_kernel_matrix(params, times_a, times_b=None):
    """``a^2 exp(-|t - t'| / l)`` evaluated on all pairs."""
    if not (params.amplitude > 0 and params.lengthscale > 0):
        raise ParameterError("OU kernel parameters must be positive")
    times_a = _check_finite(times_a)
    times_b = times_a if times_b is None else _check_finite(times_b)
    return _kernels.ou_kernel(times_a, times_b, params.amplitude, params.lengthscale)


def jittered_cholesky(mat, scale=1.0, start=JITTER_START, max_jitter=JITTER_MAX):
    """Cholesky of ``mat + j * scale * I`` with ``j`` escalating by 10x on failure.

    Returns ``(chol, jitter)`` where ``jitter`` is the absolute amount added.
    ``start=0`` tries the bare matrix first, then escalates from ``JITTER_START``.
    """
    n = mat.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    if start == 0:
        try:
            return np.linalg.cholesky(mat), 0.0
        except np.linalg.LinAlgError:
            start = JITTER_START
    rel = start
    while rel <= max_jitter * (1 + 1e-9):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(mat + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise FactorizationError(f"matrix not positive definite even with jitter {max_jitter * scale:g}")


def ou_cov_factor(params, times):
    """Jittered OU covariance at ``times`` and its Cholesky factor."""
    cov = ou_kernel_matrix(params, times)
    chol, jitter = jittered_cholesky(cov, scale=params.amplitude**2)
    if jitter:
        cov = cov + jitter * np.eye(cov.shape[0])
    return cov, chol


def chol_logdet(chol):
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def mvn_logpdf(x, dist):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != dist.dim or dist.chol.shape != (dist.dim, dist.dim):
        raise ValueError(f"dimension mismatch: x has {x.shape[0]}, distribution has {dist.dim}")
    if dist.dim == 0:
        return 0.0
    alpha = solve_triangular(dist.chol, x - dist.mean, lower=True)
    return -0.5 * (dist.dim * LOG_2PI + chol_logdet(dist.chol) + float(alpha @ alpha))


def mvn_sample(dist, rng, size=None):
    """Draw ``mean + L eps``; ``size`` adds a leading sample axis."""
    if size is None:
        return dist.mean + dist.chol @ rng.standard_normal(dist.dim)
    eps = rng.standard_normal((size, dist.dim))
    return dist.mean + eps @ dist.chol.T


def softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    expd = np.exp(shifted)
    return expd / np.sum(expd, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def chol_inverse(chol):
    """Inverse of ``L L^T`` from its lower factor."""
    return cho_solve((chol, True), np.eye(chol.shape[0]))
