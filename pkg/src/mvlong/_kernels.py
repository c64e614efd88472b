"""Inner-loop numeric kernels.

Each kernel has a pure-numpy implementation and, when numba is importable,
an ``@njit`` twin. The compiled path is used by default; set
``MVLONG_DISABLE_NUMBA=1`` to force the numpy path. Both are always
importable under explicit names so tests and the benchmark can compare them.
"""
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("MVLONG_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# --------------------------------------------------------------------------
# B-spline basis (Cox-de Boor)
# --------------------------------------------------------------------------

def bspline_basis_numpy(knots, degree, t):
    """Evaluate all B-spline basis functions on a clamped knot vector.

    Parameters
    ----------
    knots : ndarray, shape (m,)
        Full (clamped) knot vector.
    degree : int
        Polynomial degree.
    t : ndarray, shape (n,)
        Evaluation points, assumed inside ``[knots[0], knots[-1]]``.

    Returns
    -------
    ndarray, shape (n, m - degree - 1)
    """
    knots = np.asarray(knots, dtype=float)
    t = np.asarray(t, dtype=float)[:, None]
    n_intervals = knots.size - 1
    basis = ((knots[:-1] <= t) & (t < knots[1:])).astype(float)
    # the right boundary belongs to the last non-degenerate interval
    at_end = t[:, 0] >= knots[-1]
    if np.any(at_end):
        basis[at_end] = 0.0
        basis[at_end, n_intervals - degree - 1] = 1.0
    for k in range(1, degree + 1):
        lo = knots[: n_intervals - k]
        lo_span = knots[k:n_intervals] - lo
        hi = knots[k + 1 : n_intervals + 1]
        hi_span = hi - knots[1 : n_intervals - k + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            w_left = np.where(lo_span > 0, (t - lo) / lo_span, 0.0)
            w_right = np.where(hi_span > 0, (hi - t) / hi_span, 0.0)
        basis = w_left * basis[:, :-1] + w_right * basis[:, 1:]
    return basis


def _bspline_basis_loops(knots, degree, t):
    n_basis = knots.shape[0] - degree - 1
    out = np.zeros((t.shape[0], n_basis))
    left = np.zeros(degree + 1)
    right = np.zeros(degree + 1)
    vals = np.zeros(degree + 1)
    for row in range(t.shape[0]):
        u = t[row]
        if u >= knots[n_basis]:
            span = n_basis - 1
        else:
            lo = degree
            hi = n_basis
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if u < knots[mid]:
                    hi = mid
                else:
                    lo = mid
            span = lo
        vals[0] = 1.0
        for j in range(1, degree + 1):
            left[j] = u - knots[span + 1 - j]
            right[j] = knots[span + j] - u
            saved = 0.0
            for r in range(j):
                temp = vals[r] / (right[r + 1] + left[j - r])
                vals[r] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            vals[j] = saved
        for j in range(degree + 1):
            out[row, span - degree + j] = vals[j]
    return out


bspline_basis_numba = _njit(_bspline_basis_loops)


# --------------------------------------------------------------------------
# Ornstein-Uhlenbeck covariance
# --------------------------------------------------------------------------

def ou_kernel_numpy(times_a, times_b, amplitude, lengthscale):
    diff = np.abs(np.subtract.outer(times_a, times_b))
    return amplitude**2 * np.exp(-diff / lengthscale)


def _ou_kernel_loops(times_a, times_b, amplitude, lengthscale):
    na = times_a.shape[0]
    nb = times_b.shape[0]
    out = np.empty((na, nb))
    a2 = amplitude * amplitude
    inv_l = 1.0 / lengthscale
    for i in range(na):
        for j in range(nb):
            out[i, j] = a2 * math.exp(-abs(times_a[i] - times_b[j]) * inv_l)
    return out


ou_kernel_numba = _njit(_ou_kernel_loops)


# --------------------------------------------------------------------------
# Expected residual sums of squares over a discrete subpopulation mixture
# --------------------------------------------------------------------------

def residual_sums_numpy(base_resid, curves, weights):
    """Per-component squared norms and the mixture-averaged residual.

    ``base_resid`` is the residual before subtracting a subpopulation curve,
    ``curves`` holds one curve per column. Returns ``(ss, mean_resid)`` with
    ``ss[k] = ||base_resid - curves[:, k]||^2`` and
    ``mean_resid = base_resid - curves @ weights``.
    """
    resid = base_resid[:, None] - curves
    return np.einsum("ij,ij->j", resid, resid), base_resid - curves @ weights


def _residual_sums_loops(base_resid, curves, weights):
    n, k = curves.shape
    ss = np.zeros(k)
    mean_resid = base_resid.copy()
    for j in range(n):
        for g in range(k):
            d = base_resid[j] - curves[j, g]
            ss[g] += d * d
            mean_resid[j] -= weights[g] * curves[j, g]
    return ss, mean_resid


residual_sums_numba = _njit(_residual_sums_loops)


if USE_NUMBA:
    def bspline_basis(knots, degree, t):
        return bspline_basis_numba(np.ascontiguousarray(knots, dtype=np.float64), int(degree),
                                   np.ascontiguousarray(t, dtype=np.float64))

    def ou_kernel(times_a, times_b, amplitude, lengthscale):
        return ou_kernel_numba(np.ascontiguousarray(times_a, dtype=np.float64),
                               np.ascontiguousarray(times_b, dtype=np.float64),
                               float(amplitude), float(lengthscale))

    def residual_sums(base_resid, curves, weights):
        return residual_sums_numba(np.ascontiguousarray(base_resid, dtype=np.float64),
                                   np.ascontiguousarray(curves, dtype=np.float64),
                                   np.ascontiguousarray(weights, dtype=np.float64))
else:
    bspline_basis = bspline_basis_numpy
    ou_kernel = ou_kernel_numpy
    residual_sums = residual_sums_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"
