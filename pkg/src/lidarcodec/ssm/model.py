"""Autoregressive entropy model: tokens -> stacked SSM layers -> softmax PMF."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import ModelConfig
from ..errors import NumericError
from ..geom import SensorConfig
from ..tokenizer import START, embed, embed_backward
from .layers import (
    LAYER_KEYS,
    LayerState,
    check_finite,
    exact_dot,
    fast_dot,
    layer_backward,
    layer_forward,
    layer_step,
)

LN2 = math.log(2.0)


@dataclass
class Model:
    config: ModelConfig
    sensor: SensorConfig
    params: dict = field(repr=False)

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, self.sensor, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.config, self.sensor, {k: v.copy() for k, v in self.params.items()})

    @property
    def digest(self) -> bytes:
        from .checkpoint import model_digest

        return model_digest(self)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def layer_params(params, i):
    pre = f"layer{i}."
    return {k: params[pre + k] for k in LAYER_KEYS}


def init_params(cfg: ModelConfig, sensor: SensorConfig, seed=0, dtype=np.float32) -> dict:
    """Fan-in scaled uniform init; decays chosen so state half-lives span 1..window."""
    if sensor.A != cfg.A:
        from ..errors import ConfigurationError

        raise ConfigurationError(f"sensor alphabet {sensor.A} != model alphabet {cfg.A}")
    rng = np.random.default_rng(seed)

    def unif(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    dv, du, dr, dx = cfg.dims
    D, E, N, R, K, A = cfg.D, cfg.inner, cfg.ssm_state, cfg.dt_rank, cfg.conv_k, cfg.A
    p = {
        "tok.embed_v": unif((sensor.L, dv), 1),
        "tok.embed_u": unif((sensor.W, du), 1),
        "tok.rho_w": unif((dr,), 1),
        "tok.rho_b": unif((dr,), 1),
        "tok.embed_x": unif((A, dx), 1),
        "tok.start": unif((dx,), 1),
    }
    dt_lo, dt_hi = 1e-2, 1e-1
    dt_mid = math.sqrt(dt_lo * dt_hi)
    half_life = np.logspace(0.0, math.log10(max(cfg.window, 1)), N) if N > 1 else np.array([1.0])
    a_row = np.log(LN2 / (dt_mid * half_life))
    for i in range(cfg.S):
        pre = f"layer{i}."
        dt0 = np.exp(rng.uniform(math.log(dt_lo), math.log(dt_hi), size=E))
        p.update({
            pre + "ln_g": np.ones(D),
            pre + "ln_b": np.zeros(D),
            pre + "w_x": unif((D, E), D),
            pre + "w_z": unif((D, E), D),
            pre + "conv_w": unif((E, K), K),
            pre + "conv_b": unif((E,), K),
            pre + "w_xproj": unif((E, R + 2 * N), E),
            pre + "w_dt": unif((R, E), R),
            # inverse softplus of dt0
            pre + "b_dt": dt0 + np.log(-np.expm1(-dt0)),
            pre + "a_log": np.tile(a_row, (E, 1)),
            pre + "d_skip": np.ones(E),
            pre + "w_out": unif((E, D), E),
        })
    p["head.w"] = unif((D, A), D)
    p["head.b"] = np.zeros(A)
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()}


def new_model(cfg: ModelConfig, sensor: SensorConfig, seed=0, dtype=np.float32) -> Model:
    return Model(cfg, sensor, init_params(cfg, sensor, seed, dtype))


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def pmf_head(features, w, b, dot=exact_dot):
    """Softmax over the alphabet for each row of ``features``, normalised in float64."""
    logits = (dot(features, w) + b).astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def nll_bits(pmfs, symbols, valid=None) -> float:
    """``-sum log2 p(x)`` over unmasked positions."""
    pmfs = np.asarray(pmfs, dtype=np.float64)
    symbols = np.asarray(symbols, dtype=np.int64)
    p = np.take_along_axis(pmfs, symbols[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        bits = -np.log2(p)
    if valid is not None:
        bits = np.where(np.asarray(valid, dtype=bool), bits, 0.0)
    return float(bits.sum())


def forward(model: Model, batch, mask=frozenset(), keep=False, dot=fast_dot, compiled=True):
    """Teacher-forced pass over whole windows.

    ``batch`` holds ``(B, T)`` arrays ``v``, ``u``, ``rho_n``, ``prev``.
    Returns ``(logits, caches)``; caches is ``None`` unless ``keep``.
    """
    params, cfg = model.params, model.config
    F = embed(batch["v"], batch["u"], batch["rho_n"], batch["prev"], params, mask)
    caches = [] if keep else None
    for i in range(cfg.S):
        F, c = layer_forward(
            F, layer_params(params, i), cfg, keep=keep, dot=dot, compiled=compiled
        )
        check_finite(F, f"layer {i}")
        if keep:
            caches.append(c)
    logits = dot(F, params["head.w"]) + params["head.b"]
    if keep:
        caches.append(F)
    return logits, caches


def window_pmfs(model: Model, batch, mask=frozenset(), dot=exact_dot, compiled=True):
    logits, _ = forward(model, batch, mask, dot=dot, compiled=compiled)
    logits = logits.astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(model: Model, batch, mask=frozenset(), scale=1.0, compiled=True):
    """NLL in bits (times ``scale``) over valid positions and its gradients.

    ``batch`` additionally carries ``sym`` and ``valid`` ``(B, T)`` arrays.
    """
    params, cfg = model.params, model.config
    logits, caches = forward(model, batch, mask, keep=True, compiled=compiled)
    logp = log_softmax(logits)
    sym = batch["sym"]
    valid = batch["valid"].astype(logits.dtype)
    picked = np.take_along_axis(logp, sym[..., None], axis=-1)[..., 0]
    loss = -float((picked * valid).sum()) / LN2 * scale
    # d(-log2 p_sym)/d logits = (softmax - onehot) / ln 2
    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, sym[..., None],
        np.take_along_axis(dlogits, sym[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= (valid * (scale / LN2))[..., None]
    F_out = caches[-1]
    grads = {
        "head.w": F_out.reshape(-1, cfg.D).T @ dlogits.reshape(-1, cfg.A),
        "head.b": dlogits.sum(axis=(0, 1)),
    }
    dF = dlogits @ params["head.w"].T
    for i in range(cfg.S - 1, -1, -1):
        dF, g = layer_backward(dF, caches[i], layer_params(params, i), cfg)
        for k, v in g.items():
            grads[f"layer{i}.{k}"] = v
    grads.update(
        embed_backward(dF, batch["v"], batch["u"], batch["rho_n"], batch["prev"], params, mask)
    )
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    return loss, grads


class StepDecoder:
    """Position-by-position evaluation of a batch of windows.

    ``step`` takes the context of position ``t`` (geometry plus the symbol at
    ``t-1``, or ``START``) and returns the PMF rows for position ``t``. The
    same object serves encoder and decoder; only the source of the previous
    symbol differs.
    """

    def __init__(self, model: Model, batch_size: int, mask=frozenset()):
        self.model = model
        self.mask = mask
        self.layers = [layer_params(model.params, i) for i in range(model.config.S)]
        self.states = [LayerState(batch_size, model.config, model.dtype) for _ in self.layers]
        self.t = 0

    def step(self, v, u, rho_n, prev):
        p = self.model.params
        f = embed(v, u, rho_n, prev, p, self.mask)
        for i, (lp, st) in enumerate(zip(self.layers, self.states)):
            f = layer_step(f, lp, self.model.config, st)
            check_finite(f[:, None, :], f"layer {i} step {self.t}")
        self.t += 1
        return pmf_head(f, p["head.w"], p["head.b"])


def teacher_forced_prev(sym):
    """``prev`` array for windows of symbols: shift right, START at the head."""
    sym = np.asarray(sym, dtype=np.int64)
    prev = np.empty_like(sym)
    prev[..., 0] = START
    prev[..., 1:] = sym[..., :-1]
    return prev
