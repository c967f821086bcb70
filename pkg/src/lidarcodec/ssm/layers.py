"""Selective state-space layer: forward, reverse pass and single-step update.

Shapes: ``B`` windows, ``T`` positions, ``D`` model width, ``E`` inner width,
``N`` state size, ``R`` step-size rank, ``K`` conv taps.

Per layer parameters (prefix ``layer{i}.``)::

    ln_g, ln_b (D,)       w_x, w_z (D, E)       conv_w (E, K)   conv_b (E,)
    w_xproj (E, R+2N)     w_dt (R, E)  b_dt (E,)
    a_log (E, N)          d_skip (E,)           w_out (E, D)

The discretisation is zero-order hold on the diagonal transition::

    A      = -exp(a_log)
    dt     = softplus(dt_low @ w_dt + b_dt)
    A_bar  = exp(dt * A)
    B_bar  = expm1(dt * A) / A * B
    h_t    = A_bar_t * h_{t-1} + B_bar_t * x_t
    y_t    = <h_t, C_t> + d_skip * x_t
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from . import kernels

LN_EPS = 1e-5
LAYER_KEYS = (
    "ln_g", "ln_b", "w_x", "w_z", "conv_w", "conv_b",
    "w_xproj", "w_dt", "b_dt", "a_log", "d_skip", "w_out",
)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def dsilu(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    return np.logaddexp(0.0, x)


def fast_dot(x, w):
    return x @ w


def exact_dot(x, w):
    """Matrix product whose rows do not depend on how many rows are stacked.

    BLAS picks different kernels (and summation orders) by problem size;
    einsum's own loop does not. Coding relies on this to make PMFs
    independent of how windows are batched.
    """
    lead = x.shape[:-1]
    out = np.einsum("bk,kn->bn", x.reshape(-1, x.shape[-1]), w)
    return out.reshape(*lead, w.shape[-1])


def _layer_norm(F, g, b):
    mu = F.mean(axis=-1, keepdims=True)
    xc = F - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def _split_proj(dbc, R, N):
    return dbc[..., :R], dbc[..., R:R + N], dbc[..., R + N:]


def causal_conv(xp, w, b, T):
    """Depth-wise conv over a left-padded ``(B, T+K-1, E)`` input."""
    acc = b + w[:, 0] * xp[:, 0:T]
    for k in range(1, w.shape[1]):
        acc = acc + w[:, k] * xp[:, k:k + T]
    return acc


def selective_scan(xs, dt, A, Bm, Cm, d_skip, keep_states=False):
    """Run the recurrence left to right over ``T``.

    ``xs`` and ``dt`` are ``(B, T, E)``, ``Bm``/``Cm`` are ``(B, T, N)``,
    ``A`` is ``(E, N)`` and negative. Returns ``y`` and, when requested,
    the tuple ``(states, A_bar, E1)`` needed by :func:`scan_backward`.
    """
    Bsz, T, E = xs.shape
    dA = dt[..., None] * A
    A_bar = np.exp(dA)
    E1 = np.expm1(dA) / A
    Bx = E1 * Bm[:, :, None, :] * xs[..., None]
    h = np.zeros((Bsz, E, A.shape[1]), dtype=xs.dtype)
    states = np.empty_like(Bx) if keep_states else None
    y = np.empty_like(xs)
    for t in range(T):
        h = A_bar[:, t] * h + Bx[:, t]
        if keep_states:
            states[:, t] = h
        y[:, t] = np.einsum("ben,bn->be", h, Cm[:, t])
    y = y + d_skip * xs
    if keep_states:
        return y, (states, A_bar, E1)
    return y


def scan_backward(dy, xs, dt, A, Bm, Cm, d_skip, saved):
    """Reverse pass of :func:`selective_scan`.

    Returns ``(dxs, ddt, dA, dBm, dCm, dd_skip)``.
    """
    states, A_bar, E1 = saved
    T = xs.shape[1]
    dd_skip = (dy * xs).sum(axis=(0, 1))
    dxs = dy * d_skip
    dCm = np.einsum("bte,bten->btn", dy, states)
    dA_bar = np.empty_like(states)
    dBx = np.empty_like(states)
    carry = np.zeros_like(states[:, 0])
    for t in range(T - 1, -1, -1):
        dh = dy[:, t, :, None] * Cm[:, t, None, :] + carry
        dBx[:, t] = dh
        if t > 0:
            dA_bar[:, t] = dh * states[:, t - 1]
        else:
            dA_bar[:, t] = 0.0
        carry = dh * A_bar[:, t]
    Bb = Bm[:, :, None, :]
    xe = xs[..., None]
    dE1 = dBx * Bb * xe
    dBm = (dBx * E1 * xe).sum(axis=2)
    dxs = dxs + (dBx * E1 * Bb).sum(axis=-1)
    dtn = dt[..., None]
    ddt = (dA_bar * A_bar * A + dE1 * A_bar).sum(axis=-1)
    dA = (dA_bar * A_bar * dtn + dE1 * (dtn * A_bar - E1) / A).sum(axis=(0, 1))
    return dxs, ddt, dA, dBm, dCm, dd_skip


def _c(a):
    return np.ascontiguousarray(a)


def layer_forward(F, p, cfg, keep=False, dot=fast_dot, compiled=True):
    """One residual layer on ``(B, T, D)``; returns ``(F_out, cache)``.

    ``compiled`` routes the scan through the numba kernels; the numpy scan
    is kept as the reference implementation.
    """
    Bsz, T, _ = F.shape
    K, R, N = cfg.conv_k, cfg.dt_rank, cfg.ssm_state
    xn, xhat, rstd = _layer_norm(F, p["ln_g"], p["ln_b"])
    xb = dot(xn, p["w_x"])
    z = dot(xn, p["w_z"])
    pad = np.zeros((Bsz, K - 1, xb.shape[-1]), dtype=xb.dtype)
    xp = np.concatenate([pad, xb], axis=1)
    xc = causal_conv(xp, p["conv_w"], p["conv_b"], T)
    xs = silu(xc)
    dbc = dot(xs, p["w_xproj"])
    dtl, Bm, Cm = _split_proj(dbc, R, N)
    dtr = dot(dtl, p["w_dt"]) + p["b_dt"]
    dt = softplus(dtr)
    A = -np.exp(p["a_log"])
    if compiled:
        Bm, Cm = _c(Bm), _c(Cm)
        y, saved = kernels.scan_forward(_c(xs), _c(dt), A, Bm, Cm, p["d_skip"]), None
    elif keep:
        y, saved = selective_scan(xs, dt, A, Bm, Cm, p["d_skip"], keep_states=True)
    else:
        y, saved = selective_scan(xs, dt, A, Bm, Cm, p["d_skip"]), None
    gz = silu(z)
    o = y * gz
    out = F + dot(o, p["w_out"])
    cache = None
    if keep:
        cache = dict(
            xn=xn, xhat=xhat, rstd=rstd, z=z, xp=xp, xc=xc, xs=xs, dtl=dtl,
            Bm=Bm, Cm=Cm, dtr=dtr, dt=dt, A=A, saved=saved, y=y, gz=gz, o=o,
        )
    return out, cache


def _wgrad(x, g):
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def layer_backward(dout, c, p, cfg):
    """Given ``dL/dF_out`` return ``(dL/dF_in, param grads)``."""
    T = dout.shape[1]
    K = cfg.conv_k
    g = {}
    g["w_out"] = _wgrad(c["o"], dout)
    do = dout @ p["w_out"].T
    dy = do * c["gz"]
    dz = do * c["y"] * dsilu(c["z"])
    if c["saved"] is None:
        dxs, ddt, dA, dBm, dCm, g["d_skip"] = kernels.scan_backward(
            _c(dy), _c(c["xs"]), _c(c["dt"]), c["A"], c["Bm"], c["Cm"], p["d_skip"]
        )
    else:
        dxs, ddt, dA, dBm, dCm, g["d_skip"] = scan_backward(
            dy, c["xs"], c["dt"], c["A"], c["Bm"], c["Cm"], p["d_skip"], c["saved"]
        )
    g["a_log"] = dA * c["A"]
    ddtr = ddt * sigmoid(c["dtr"])
    g["b_dt"] = ddtr.sum(axis=(0, 1))
    g["w_dt"] = _wgrad(c["dtl"], ddtr)
    ddtl = ddtr @ p["w_dt"].T
    ddbc = np.concatenate([ddtl, dBm, dCm], axis=-1)
    g["w_xproj"] = _wgrad(c["xs"], ddbc)
    dxs = dxs + ddbc @ p["w_xproj"].T
    dxc = dxs * dsilu(c["xc"])
    g["conv_b"] = dxc.sum(axis=(0, 1))
    xp = c["xp"]
    w = p["conv_w"]
    gw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for k in range(K):
        gw[:, k] = (dxc * xp[:, k:k + T]).sum(axis=(0, 1))
        dxp[:, k:k + T] += dxc * w[:, k]
    g["conv_w"] = gw
    dxb = dxp[:, K - 1:]
    g["w_x"] = _wgrad(c["xn"], dxb)
    g["w_z"] = _wgrad(c["xn"], dz)
    dxn = dxb @ p["w_x"].T + dz @ p["w_z"].T
    g["ln_g"] = (dxn * c["xhat"]).sum(axis=(0, 1))
    g["ln_b"] = dxn.sum(axis=(0, 1))
    dxhat = dxn * p["ln_g"]
    xhat = c["xhat"]
    dF = dout + c["rstd"] * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dF, g


class LayerState:
    """Recurrent state of one layer for position-by-position inference."""

    __slots__ = ("conv", "h")

    def __init__(self, batch, cfg, dtype):
        self.conv = np.zeros((batch, cfg.conv_k - 1, cfg.inner), dtype=dtype)
        self.h = np.zeros((batch, cfg.inner, cfg.ssm_state), dtype=dtype)


def layer_step(f, p, cfg, state: LayerState):
    """Advance one position for every row of ``f`` ``(B, D)``; updates ``state``.

    Uses the same operation order as :func:`layer_forward`, with
    :func:`exact_dot` products.
    """
    R, N = cfg.dt_rank, cfg.ssm_state
    xn, _, _ = _layer_norm(f, p["ln_g"], p["ln_b"])
    xb = exact_dot(xn, p["w_x"])
    z = exact_dot(xn, p["w_z"])
    xp = np.concatenate([state.conv, xb[:, None, :]], axis=1)
    xc = causal_conv(xp, p["conv_w"], p["conv_b"], 1)[:, 0]
    state.conv = xp[:, 1:]
    xs = silu(xc)
    dbc = exact_dot(xs, p["w_xproj"])
    dtl, Bm, Cm = _split_proj(dbc, R, N)
    dt = softplus(exact_dot(dtl, p["w_dt"]) + p["b_dt"])
    A = -np.exp(p["a_log"])
    dA = dt[..., None] * A
    A_bar = np.exp(dA)
    E1 = np.expm1(dA) / A
    state.h = A_bar * state.h + E1 * Bm[:, None, :] * xs[..., None]
    y = np.einsum("ben,bn->be", state.h, Cm) + p["d_skip"] * xs
    return f + exact_dot(y * silu(z), p["w_out"])


def check_finite(F, where):
    if np.all(np.isfinite(F)):
        return
    bad = np.argwhere(~np.isfinite(F))[0]
    pos = ", ".join(str(int(i)) for i in bad[:-1])
    raise NumericError(f"non-finite activation after {where} at (window, position) = ({pos})")
