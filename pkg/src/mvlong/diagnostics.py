"""Small built-in problem instances for gradient checking."""
import numpy as np

from mvlong.inference import finite_difference_check, init_local, local_update, pack_local, unpack_local
from mvlong.model import ModelConfig, random_params, sample_patient


def tiny_instance(seed=0, n_patients=4, max_obs_per_var=3):
    """P=3, G=2, G_p=2 with a handful of short sequences.

    Locals are taken a few CAVI sweeps in and then jittered so no gradient
    coordinate sits at an optimum by construction.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variables=("v0", "v1", "v2"), n_clusters=2, n_subpops=2, n_covariates=3)
    params = random_params(cfg, rng)
    lo, hi = params.basis.boundary
    patients = []
    for i in range(n_patients):
        x = np.r_[1.0, rng.standard_normal(cfg.n_covariates - 1)]
        times = [np.sort(rng.uniform(lo, hi, rng.integers(0, max_obs_per_var + 1))) for _ in range(cfg.P)]
        pt, _ = sample_patient(params, x, times, rng, f"tiny{i}")
        patients.append(pt)
    locals_ = []
    for pt in patients:
        lv = local_update(params, pt, init_local(params, pt), 3)
        vec = pack_local(lv)
        locals_.append(unpack_local(vec + 0.1 * rng.standard_normal(vec.size), lv))
    return params, patients, locals_


def run_gradcheck(seed=0, h=1e-5):
    params, patients, locals_ = tiny_instance(seed)
    return finite_difference_check(params, patients, locals_, h=h, rng=np.random.default_rng(seed))
