import numpy as np

from econas.orchestrator import Estimates, candidate_ids
from econas.proxies import load_coefficients, predict_model_energy
from econas.space import DESK_SPACE, decode

COEF = load_coefficients()


def synthetic_estimates(n, seed=0):
    """Real energy predictions with a random stand-in for the NASWOT score."""
    ids = candidate_ids(DESK_SPACE, n, seed)
    e = [predict_model_energy(decode(int(i), DESK_SPACE), COEF, DESK_SPACE.input_shape) for i in ids]
    raw = np.random.default_rng(seed).normal(50, 5, len(ids))
    return Estimates.from_raw(ids, e, raw)
