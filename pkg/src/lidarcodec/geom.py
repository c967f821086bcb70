"""Sensor geometry: spherical mapping, grid indices and scan-order serialization.

Everything here is a pure function of its inputs. The decoder re-runs
:func:`serialize_positions` on the shared geometry and must land on the
exact same order as the encoder, so all index arithmetic is done in float64
with a total order (laser, azimuth, capture index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ValidationError

__all__ = [
    "SensorConfig",
    "PointCloudFrame",
    "SphericalPoint",
    "Sequence",
    "SerializedFrame",
    "cartesian_to_spherical",
    "spherical_arrays",
    "quantize_indices",
    "grid_indices",
    "serialize",
    "serialize_positions",
    "deserialize_order",
]


@dataclass(frozen=True)
class SensorConfig:
    """Grid definition shared by encoder and decoder.

    Defaults describe an HDL-64E-like spinning sensor with the 0-99
    reflectance alphabet used for KITTI.
    """

    L: int = 64
    W: int = 2048
    phi_up: float = 0.03491
    phi_down: float = -0.43284
    rho_max: float = 120.0
    A: int = 100

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ValidationError(f"L must be a positive integer, got {self.L}")
        if int(self.W) != self.W or self.W < 1:
            raise ValidationError(f"W must be a positive integer, got {self.W}")
        if int(self.A) != self.A or self.A < 2:
            raise ValidationError(f"A must be >= 2, got {self.A}")
        for name in ("phi_up", "phi_down", "rho_max"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if not self.phi_down < self.phi_up:
            raise ValidationError("phi_down must be below phi_up")
        if not self.rho_max > 0:
            raise ValidationError("rho_max must be positive")

    def to_dict(self):
        return {
            "L": int(self.L),
            "W": int(self.W),
            "phi_up": float(self.phi_up),
            "phi_down": float(self.phi_down),
            "rho_max": float(self.rho_max),
            "A": int(self.A),
        }


@dataclass
class PointCloudFrame:
    positions: np.ndarray
    reflectance: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        refl = np.asarray(self.reflectance)
        if refl.size and not np.issubdtype(refl.dtype, np.integer):
            if not np.all(np.equal(np.mod(refl, 1), 0)):
                raise ValidationError("reflectance symbols must be integers")
        self.reflectance = refl.astype(np.int64).reshape(-1)
        if len(self.positions) != len(self.reflectance):
            raise ValidationError(
                f"{len(self.positions)} positions but {len(self.reflectance)} symbols"
            )

    @property
    def n(self) -> int:
        return len(self.reflectance)

    def validate(self, cfg: SensorConfig) -> None:
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions contain non-finite values")
        if self.n and (self.reflectance.min() < 0 or self.reflectance.max() >= cfg.A):
            bad = int(np.flatnonzero((self.reflectance < 0) | (self.reflectance >= cfg.A))[0])
            raise ValidationError(
                f"symbol {int(self.reflectance[bad])} at point {bad} outside [0, {cfg.A})"
            )


@dataclass(frozen=True)
class SphericalPoint:
    rho: float
    phi: float
    theta: float


def spherical_arrays(positions):
    """Vectorised spherical mapping: returns ``(rho, phi, theta)`` arrays."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise ValidationError("positions contain non-finite values")
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, z / np.where(rho > 0, rho, 1.0), 0.0)
    phi = np.arcsin(np.clip(ratio, -1.0, 1.0))
    # + 0.0 folds -0.0 into +0.0 so theta stays in (-pi, pi]
    theta = np.arctan2(y + 0.0, x + 0.0)
    return rho, phi, theta


def cartesian_to_spherical(p) -> SphericalPoint:
    rho, phi, theta = spherical_arrays(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return SphericalPoint(float(rho[0]), float(phi[0]), float(theta[0]))


def grid_indices(phi, theta, cfg: SensorConfig):
    """1-based laser and azimuth indices, clipped to ``[1, L]`` and ``[1, W]``."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    v = np.floor(cfg.L * ((phi - cfg.phi_down) / (cfg.phi_up - cfg.phi_down))) + 1
    u = np.floor(cfg.W * (theta / (2 * np.pi) + 0.5)) + 1
    v = np.clip(v, 1, cfg.L).astype(np.int64)
    u = np.clip(u, 1, cfg.W).astype(np.int64)
    return v, u


def quantize_indices(sp: SphericalPoint, cfg: SensorConfig):
    v, u = grid_indices(sp.phi, sp.theta, cfg)
    return int(v), int(u)


@dataclass
class Sequence:
    """Records of one laser in scan order; column arrays of equal length."""

    symbols: np.ndarray
    v: np.ndarray
    u: np.ndarray
    rho: np.ndarray
    src_index: np.ndarray

    def __len__(self):
        return len(self.src_index)

    def records(self):
        return list(
            zip(
                self.symbols.tolist(),
                self.v.tolist(),
                self.u.tolist(),
                self.rho.tolist(),
                self.src_index.tolist(),
            )
        )


@dataclass
class SerializedFrame:
    sequences: list
    inverse: np.ndarray
    cfg: SensorConfig = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return len(self.inverse)

    def counts(self):
        return [len(s) for s in self.sequences]

    def symbols(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.symbols for s in self.sequences])


def serialize_positions(positions, cfg: SensorConfig, symbols=None) -> SerializedFrame:
    """Group points by laser index and order each group by azimuth index.

    Ties in azimuth keep capture order. ``symbols`` may be omitted (decoder
    side); the records then carry zeros to be filled in later.
    """
    rho, phi, theta = spherical_arrays(positions)
    n = len(rho)
    v, u = grid_indices(phi, theta, cfg)
    src = np.arange(n, dtype=np.int64)
    if symbols is None:
        symbols = np.zeros(n, dtype=np.int64)
    symbols = np.asarray(symbols, dtype=np.int64)
    order = np.lexsort((src, u, v))
    counts = np.bincount(v - 1, minlength=cfg.L) if n else np.zeros(cfg.L, dtype=np.int64)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    sequences = []
    for l in range(cfg.L):
        idx = order[bounds[l]:bounds[l + 1]]
        sequences.append(
            Sequence(
                symbols=symbols[idx].copy(),
                v=v[idx],
                u=u[idx],
                rho=rho[idx],
                src_index=idx.astype(np.int64),
            )
        )
    return SerializedFrame(sequences=sequences, inverse=order.astype(np.int64), cfg=cfg)


def serialize(frame: PointCloudFrame, cfg: SensorConfig) -> SerializedFrame:
    frame.validate(cfg)
    return serialize_positions(frame.positions, cfg, frame.reflectance)


def _check_permutation(inverse, n):
    inverse = np.asarray(inverse)
    if inverse.ndim != 1 or len(inverse) != n:
        raise IntegrityError(f"permutation has length {len(inverse)}, expected {n}")
    if n == 0:
        return inverse
    if not np.issubdtype(inverse.dtype, np.integer):
        raise IntegrityError("permutation entries must be integers")
    if inverse.min() < 0 or inverse.max() >= n:
        raise IntegrityError("permutation index out of range")
    seen = np.bincount(inverse, minlength=n)
    if np.any(seen != 1):
        dup = int(np.flatnonzero(seen > 1)[0])
        raise IntegrityError(f"permutation repeats index {dup}")
    return inverse


def deserialize_order(sf: SerializedFrame, symbols=None) -> np.ndarray:
    """Scatter serialized symbols back to capture order.

    ``symbols`` overrides the symbols stored in ``sf`` (concatenated over
    sequences), which is how the decoder feeds in what it decoded.
    """
    flat = sf.symbols() if symbols is None else np.asarray(symbols, dtype=np.int64)
    n = len(flat)
    inverse = _check_permutation(sf.inverse, n)
    out = np.empty(n, dtype=np.int64)
    out[inverse] = flat
    return out
