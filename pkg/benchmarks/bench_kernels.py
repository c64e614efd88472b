"""Compare the numba and numpy kernel paths.

Part one times each kernel directly at a few sizes (both implementations
are importable side by side). Part two runs a short end-to-end fit in a
subprocess per backend, since the backend is fixed at import time by
MVLONG_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 20] [--skip-fit]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mvlong import _kernels as K
from mvlong.core import SplineBasis

FIT_SNIPPET = """
import time, numpy as np
from mvlong import _kernels
from mvlong.model import ModelConfig, random_params
from mvlong.data import MissingnessSpec, VariableMissingness, simulate_cohort
from mvlong.inference import FitOptions, fit
rng = np.random.default_rng(0)
cfg = ModelConfig(variables=("a", "b", "c"), n_clusters=3, n_subpops=3, n_covariates=2)
params = random_params(cfg, rng)
spec = MissingnessSpec([VariableMissingness(0.0, 8.0, (0.0, 10.0))] * 3)
data, _ = simulate_cohort(params, 150, spec, rng)
fit(data, cfg, FitOptions(max_epochs=1, batch_size=50), rng=np.random.default_rng(1))  # warm-up / JIT
t0 = time.perf_counter()
fit(data, cfg, FitOptions(max_epochs=5, batch_size=50), rng=np.random.default_rng(1))
print(_kernels.backend(), time.perf_counter() - t0)
"""


def _time(func, args, repeat):
    func(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: func(*args), number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    basis = SplineBasis.evenly_spaced(0.0, 10.0, 8, 3)
    knots = basis.knot_vector
    rows = []
    for n in (10, 100, 1000):
        t = np.sort(rng.uniform(0.0, 10.0, n))
        base = rng.standard_normal(n)
        curves = rng.standard_normal((n, 4))
        w = np.full(4, 0.25)
        cases = [
            ("bspline_basis", K.bspline_basis_numpy, K.bspline_basis_numba, (knots, 3, t)),
            ("ou_kernel", K.ou_kernel_numpy, K.ou_kernel_numba, (t, t, 0.7, 1.3)),
            ("residual_sums", K.residual_sums_numpy, K.residual_sums_numba, (base, curves, w)),
        ]
        for name, f_np, f_nb, args in cases:
            a, b = f_np(*args), f_nb(*args)
            if isinstance(a, tuple):
                agree = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
            else:
                agree = float(np.max(np.abs(a - b)))
            t_np = _time(f_np, args, repeat)
            t_nb = _time(f_nb, args, repeat) if K.HAVE_NUMBA else float("nan")
            rows.append((name, n, t_np * 1e6, t_nb * 1e6, t_np / t_nb, agree))
    print(f"{'kernel':16s}{'n':>6s}{'numpy us':>12s}{'numba us':>12s}{'speedup':>9s}{'max diff':>11s}")
    for name, n, a, b, s, d in rows:
        print(f"{name:16s}{n:6d}{a:12.1f}{b:12.1f}{s:9.2f}{d:11.1e}")


def fit_comparison():
    print("\nend-to-end fit (150 patients, 5 epochs)")
    for disable in ("0", "1"):
        env = dict(os.environ, MVLONG_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(out.stderr)
            continue
        backend, seconds = out.stdout.split()
        print(f"  {backend:6s} {float(seconds):8.2f} s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--skip-fit", action="store_true")
    args = parser.parse_args()
    print(f"numba available: {K.HAVE_NUMBA}; default backend: {K.backend()}\n")
    kernel_table(args.repeat)
    if not args.skip_fit:
        fit_comparison()


if __name__ == "__main__":
    main()
