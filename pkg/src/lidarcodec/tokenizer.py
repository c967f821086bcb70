"""Per-point context tokens.

A token is the concatenation of four slices: laser-index embedding, azimuth
index embedding, an affine map of the normalised radial distance, and the
embedding of the previous symbol in the window (a learned start vector at
the window head). Slice widths come from ``ModelConfig.dims``.

Parameter names used here (all live in the flat model parameter dict)::

    tok.embed_v   (L, dv)      tok.embed_u  (W, du)
    tok.rho_w     (dr,)        tok.rho_b    (dr,)
    tok.embed_x   (A, dx)      tok.start    (dx,)
"""

from __future__ import annotations

import numpy as np

from .config import ABLATION_GROUPS, CONTEXT_COMPONENTS
from .errors import IntegrityError, ValidationError

START = -1  # prev-symbol marker for the window head


def normalize_radial(rho, cfg):
    """Scale radial distance into [0, 1] using the sensor's fixed range."""
    arr = np.asarray(rho, dtype=np.float64)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValidationError("radial distance must be finite and non-negative")
    out = np.minimum(arr, cfg.rho_max) / cfg.rho_max
    return float(out) if out.ndim == 0 else out


def masked_components(ablate) -> frozenset:
    out = set()
    for name in ablate or ():
        if name in ABLATION_GROUPS:
            out.update(ABLATION_GROUPS[name])
        elif name in CONTEXT_COMPONENTS:
            out.add(name)
        else:
            raise ValidationError(f"unknown context component {name!r}")
    return frozenset(out)


def _check_ranges(params, v, u, prev):
    L = params["tok.embed_v"].shape[0]
    W = params["tok.embed_u"].shape[0]
    A = params["tok.embed_x"].shape[0]
    if v.size and (v.min() < 1 or v.max() > L):
        raise IntegrityError(f"laser index outside [1, {L}]")
    if u.size and (u.min() < 1 or u.max() > W):
        raise IntegrityError(f"azimuth index outside [1, {W}]")
    if prev.size and (prev.min() < START or prev.max() >= A):
        raise IntegrityError(f"previous symbol outside [0, {A})")


def embed(v, u, rho_n, prev, params, mask=frozenset(), check=True):
    """Token matrix for arbitrary leading shape; returns ``(..., D)``.

    ``prev`` holds the previous symbol of each position or ``START``.
    ``mask`` names components whose slice is zeroed (ablation without
    retraining).
    """
    v = np.asarray(v)
    u = np.asarray(u)
    prev = np.asarray(prev)
    if check:
        _check_ranges(params, v, u, prev)
    ev = params["tok.embed_v"]
    dtype = ev.dtype
    rho_n = np.asarray(rho_n, dtype=dtype)
    parts = [
        ev[v - 1],
        params["tok.embed_u"][u - 1],
        rho_n[..., None] * params["tok.rho_w"] + params["tok.rho_b"],
        np.where(
            (prev == START)[..., None],
            params["tok.start"],
            params["tok.embed_x"][np.maximum(prev, 0)],
        ),
    ]
    for i, name in enumerate(CONTEXT_COMPONENTS):
        if name in mask:
            parts[i] = np.zeros_like(parts[i])
    return np.concatenate(parts, axis=-1)


def embed_backward(dtok, v, u, rho_n, prev, params, mask=frozenset()):
    """Gradients of the token parameters given ``dL/dtoken``."""
    dv, du, dr, dx = (params[k].shape[-1] for k in ("tok.embed_v", "tok.embed_u", "tok.rho_w", "tok.start"))
    cuts = np.cumsum([dv, du, dr])
    g_v, g_u, g_r, g_x = np.split(dtok, cuts, axis=-1)
    grads = {key: np.zeros_like(params[key]) for key in ("tok.embed_v", "tok.embed_u")}
    grads["tok.embed_x"] = np.zeros_like(params["tok.embed_x"])
    grads["tok.start"] = np.zeros_like(params["tok.start"])
    grads["tok.rho_w"] = np.zeros_like(params["tok.rho_w"])
    grads["tok.rho_b"] = np.zeros_like(params["tok.rho_b"])
    v = np.asarray(v).reshape(-1)
    u = np.asarray(u).reshape(-1)
    prev = np.asarray(prev).reshape(-1)
    rho_n = np.asarray(rho_n, dtype=dtok.dtype).reshape(-1)
    n = v.size  # explicit row count: a slice may have zero width
    if "v" not in mask:
        np.add.at(grads["tok.embed_v"], v - 1, g_v.reshape(n, dv))
    if "u" not in mask:
        np.add.at(grads["tok.embed_u"], u - 1, g_u.reshape(n, du))
    if "rho" not in mask:
        g_r = g_r.reshape(n, dr)
        grads["tok.rho_w"] = (rho_n[:, None] * g_r).sum(axis=0)
        grads["tok.rho_b"] = g_r.sum(axis=0)
    if "x" not in mask:
        g_x = g_x.reshape(n, dx)
        head = prev == START
        grads["tok.start"] = g_x[head].sum(axis=0)
        np.add.at(grads["tok.embed_x"], prev[~head], g_x[~head])
    return grads


def build_tokens(window, params, cfg, mask=frozenset()):
    """Tokens for one window of serialized records.

    ``window`` is a sequence of ``(symbol, v, u, rho, src_index)`` records in
    scan order. Row ``i`` reads the symbol of record ``i - 1`` only.
    """
    if len(window) == 0:
        return np.zeros((0, sum(params[k].shape[-1] for k in ("tok.embed_v", "tok.embed_u", "tok.rho_w", "tok.start"))))
    sym = np.array([r[0] for r in window], dtype=np.int64)
    v = np.array([r[1] for r in window], dtype=np.int64)
    u = np.array([r[2] for r in window], dtype=np.int64)
    rho = np.array([r[3] for r in window], dtype=np.float64)
    prev = np.concatenate([[START], sym[:-1]])
    return embed(v, u, normalize_radial(rho, cfg), prev, params, mask)
