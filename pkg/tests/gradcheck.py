"""Central finite differences against the analytic reverse pass."""

import numpy as np

from lidarcodec.config import ModelConfig
from lidarcodec.geom import SensorConfig
from lidarcodec.ssm import loss_and_grads, new_model
from lidarcodec.tokenizer import START

TOY_SENSOR = SensorConfig(L=3, W=4, phi_up=0.1, phi_down=-0.1, rho_max=10.0, A=5)
TOY_CONFIG = ModelConfig(D=8, S=1, window=4, A=5)


def toy_problem(seed=0, batch=3, jitter=0.3, config=TOY_CONFIG):
    """f64 toy model with randomised parameters and a matching batch.

    The jitter moves parameters off their initial values so every path
    (including the step-size projection) carries a gradient well above
    finite-difference round-off.
    """
    rng = np.random.default_rng(seed)
    model = new_model(config, TOY_SENSOR, seed=seed, dtype=np.float64)
    for k, v in model.params.items():
        v += jitter * rng.standard_normal(v.shape)
    T = config.window
    sym = rng.integers(0, 5, (batch, T))
    prev = np.concatenate([np.full((batch, 1), START), sym[:, :-1]], axis=1)
    valid = np.ones((batch, T), dtype=bool)
    valid[-1, -1] = False
    b = {
        "v": rng.integers(1, 4, (batch, T)), "u": rng.integers(1, 4, (batch, T)),
        "rho_n": rng.random((batch, T)), "prev": prev, "sym": sym, "valid": valid,
    }
    return model, b


def finite_difference(model, batch, key, eps=1e-4, compiled=True):
    p = model.params[key]
    g = np.zeros_like(p)
    for i in range(p.size):
        old = p.flat[i]
        p.flat[i] = old + eps
        hi, _ = loss_and_grads(model, batch, compiled=compiled)
        p.flat[i] = old - eps
        lo, _ = loss_and_grads(model, batch, compiled=compiled)
        p.flat[i] = old
        g.flat[i] = (hi - lo) / (2 * eps)
    return g


def relative_errors(model, batch, eps=1e-4, compiled=True):
    """``{parameter: ||analytic - fd|| / max(||analytic||, ||fd||)}``."""
    _, grads = loss_and_grads(model, batch, compiled=compiled)
    out = {}
    for key in sorted(model.params):
        fd = finite_difference(model, batch, key, eps, compiled)
        num = np.linalg.norm(grads[key] - fd)
        den = max(np.linalg.norm(grads[key]), np.linalg.norm(fd))
        out[key] = 0.0 if den == 0 else num / den
    return out
