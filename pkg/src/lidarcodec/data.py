"""Frame I/O and the synthetic corpus generator.

Synthetic frames are laid out on the sensor grid: each laser ring is cut
into segments of roughly constant range (walls, cars, ground patches), and
reflectance follows a Markov chain along the ring:

* at the first point of a ring and at every segment boundary the symbol is
  drawn around ``f(rho)``, a decaying function of range, with a wide spread
  (material variety);
* elsewhere it stays near the previous symbol, pulled gently toward
  ``f(rho)``, except with probability ``p_material`` where it re-draws as at a
  boundary.

Every draw is a rounded, clipped Gaussian, so the generator knows the exact
probability of each symbol it emits. The mean of ``-log2`` of those
probabilities is the conditional-entropy oracle used by the tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import FormatError, ValidationError
from .geom import PointCloudFrame, SensorConfig

SYNTH_SENSOR = SensorConfig(L=32, W=1024, phi_up=0.1745, phi_down=-0.5236, rho_max=120.0, A=256)
PROFILES = ("default", "distance")
PROFILE_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic corpus; frames are a pure function of this."""

    seed: int = 0
    frames: int = 8
    profile: str = "default"
    sensor: SensorConfig = SYNTH_SENSOR
    keep_prob: float = 0.35
    segment_bins: float = 48.0
    rho_lo: float = 4.0
    rho_hi: float = 80.0
    # f(rho) = refl_floor + refl_gain * exp(-rho / refl_scale)
    refl_floor: float = 25.0
    refl_gain: float = 200.0
    refl_scale: float = 25.0
    sigma_smooth: float = 3.0
    sigma_material: float = 10.0
    p_material: float = 0.08
    pull: float = 0.1
    sigma_distance: float = 6.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}")
        if self.frames < 0 or not 0 < self.keep_prob <= 1:
            raise ValidationError("frames must be >= 0 and keep_prob in (0, 1]")
        if min(self.sigma_smooth, self.sigma_material, self.sigma_distance) < 0:
            raise ValidationError("noise scales must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["sensor"] = self.sensor.to_dict()
        d["version"] = PROFILE_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("version", None)
        d["sensor"] = SensorConfig(**d["sensor"])
        return cls(**d)

    def attenuation(self, rho):
        return self.refl_floor + self.refl_gain * np.exp(-np.asarray(rho) / self.refl_scale)


DISTANCE_ONLY = SyntheticSpec(profile="distance")


def _gauss_sample(rng, mean, sigma, A):
    noise = rng.standard_normal(np.shape(mean)) * sigma
    return np.clip(np.floor(mean + noise + 0.5), 0, A - 1).astype(np.int64)


def _gauss_prob(k, mean, sigma, A):
    """P(clip(round(mean + sigma * eps)) == k)."""
    k = np.asarray(k, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if np.isscalar(sigma) and sigma == 0:
        return (np.clip(np.floor(mean + 0.5), 0, A - 1) == k).astype(np.float64)
    hi = np.where(k >= A - 1, 1.0, ndtr((k + 0.5 - mean) / sigma))
    lo = np.where(k <= 0, 0.0, ndtr((k - 0.5 - mean) / sigma))
    return hi - lo


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    frames: list
    # per frame, -log2 of the generator probability of each symbol (capture order)
    surprisal: list = field(repr=False, default_factory=list)


def _geometry(rng, spec: SyntheticSpec, rows: int):
    """Range, segment ids and keep mask for ``rows`` laser rings."""
    W = spec.sensor.W
    starts = rng.random((rows, W)) < 1.0 / spec.segment_bins
    starts[:, 0] = True
    seg = np.cumsum(starts, axis=1) - 1
    nseg = int(seg.max()) + 1
    base = np.exp(rng.uniform(math.log(spec.rho_lo), math.log(spec.rho_hi), size=(rows, nseg)))
    slope = rng.uniform(-0.01, 0.01, size=(rows, nseg))
    first = np.zeros((rows, nseg), dtype=np.int64)
    r_idx, c_idx = np.nonzero(starts)
    first[r_idx, seg[r_idx, c_idx]] = c_idx
    ridx = np.arange(rows)[:, None]
    offset = np.arange(W)[None, :] - first[ridx, seg]
    rho = base[ridx, seg] * (1.0 + slope[ridx, seg] * offset)
    rho = np.clip(rho, 1.0, spec.sensor.rho_max * 0.95)
    keep = rng.random((rows, W)) < spec.keep_prob
    return rho, seg, keep


def _reflectance(rng, spec: SyntheticSpec, rho, seg, keep):
    """Walk each ring in azimuth order; returns symbols and surprisal."""
    rows, W = rho.shape
    A = spec.sensor.A
    target = spec.attenuation(rho)
    sym = np.zeros((rows, W), dtype=np.int64)
    bits = np.zeros((rows, W))
    last = np.zeros(rows)
    last_seg = np.full(rows, -1)
    for j in range(W):
        live = keep[:, j]
        if not live.any():
            continue
        mu_t = target[:, j]
        if spec.profile == "distance":
            x = _gauss_sample(rng, mu_t, spec.sigma_distance, A)
            p = _gauss_prob(x, mu_t, spec.sigma_distance, A)
        else:
            fresh = (last_seg < 0) | (seg[:, j] != last_seg)
            mu_s = last + spec.pull * (mu_t - last)
            redraw = fresh | (rng.random(rows) < spec.p_material)
            x = np.where(
                redraw,
                _gauss_sample(rng, mu_t, spec.sigma_material, A),
                _gauss_sample(rng, mu_s, spec.sigma_smooth, A),
            )
            p_mat = _gauss_prob(x, mu_t, spec.sigma_material, A)
            p_smooth = _gauss_prob(x, mu_s, spec.sigma_smooth, A)
            p = np.where(fresh, p_mat, (1 - spec.p_material) * p_smooth + spec.p_material * p_mat)
        sym[live, j] = x[live]
        bits[live, j] = -np.log2(p[live])
        last = np.where(live, x, last)
        last_seg = np.where(live, seg[:, j], last_seg)
    return sym, bits


def _positions(rng, sensor: SensorConfig, rows_l, cols, rho):
    """Cartesian points near the centre of their grid cells."""
    jit = rng.uniform(-0.25, 0.25, size=(2, len(rows_l)))
    phi = sensor.phi_down + (rows_l + 0.5 + jit[0]) * (sensor.phi_up - sensor.phi_down) / sensor.L
    theta = (cols + 0.5 + jit[1]) * (2 * np.pi / sensor.W) - np.pi
    cphi = np.cos(phi)
    return np.stack([rho * cphi * np.cos(theta), rho * cphi * np.sin(theta), rho * np.sin(phi)], axis=1)


def generate_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    L = spec.sensor.L
    rows = spec.frames * L
    if rows == 0:
        return SyntheticCorpus(spec, [], [])
    rho, seg, keep = _geometry(rng, spec, rows)
    sym, bits = _reflectance(rng, spec, rho, seg, keep)
    frames, surprisal = [], []
    for f in range(spec.frames):
        block = slice(f * L, (f + 1) * L)
        r_l, c = np.nonzero(keep[block])
        pos = _positions(rng, spec.sensor, r_l, c, rho[block][r_l, c])
        order = rng.permutation(len(r_l))
        frames.append(PointCloudFrame(pos[order], sym[block][r_l, c][order]))
        surprisal.append(bits[block][r_l, c][order])
    return SyntheticCorpus(spec, frames, surprisal)


def generate_frames(spec: SyntheticSpec) -> list:
    return generate_corpus(spec).frames


@dataclass
class EntropyOracle:
    h_cond: float
    h_cond_se: float
    h_marg: float
    n: int


def oracle_entropies(spec: SyntheticSpec, n_symbols=1_000_000, seed_offset=10_007) -> EntropyOracle:
    """Monte Carlo conditional and marginal entropy (bits/symbol) of a profile.

    ``h_cond`` averages the generator's own ``-log2 p`` of each emitted
    symbol given its context; ``h_marg`` is the plug-in entropy of the
    pooled symbol histogram. Frames come from an independent seed.
    """
    per_frame = spec.sensor.L * spec.sensor.W * spec.keep_prob
    frames = max(1, math.ceil(n_symbols / per_frame))
    corpus = generate_corpus(replace(spec, seed=spec.seed + seed_offset, frames=frames))
    bits = np.concatenate(corpus.surprisal)
    syms = np.concatenate([f.reflectance for f in corpus.frames])
    hist = np.bincount(syms, minlength=spec.sensor.A).astype(np.float64)
    q = hist[hist > 0] / hist.sum()
    return EntropyOracle(
        h_cond=float(bits.mean()),
        h_cond_se=float(bits.std(ddof=1) / math.sqrt(len(bits))),
        h_marg=float(-(q * np.log2(q)).sum()),
        n=len(bits),
    )


# ---------------------------------------------------------------- file formats

def read_kitti_bin(path, A=100) -> PointCloudFrame:
    """KITTI velodyne scan: float32 ``(x, y, z, r)`` records, ``r`` in [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        raise FormatError(f"{path}: non-finite values")
    sym = np.clip(np.round(rec[:, 3] * (A - 1)), 0, A - 1).astype(np.int64)
    return PointCloudFrame(rec[:, :3], sym)


def write_kitti_bin(path, frame: PointCloudFrame, A=100):
    rec = np.empty((frame.n, 4), dtype="<f4")
    rec[:, :3] = frame.positions
    rec[:, 3] = frame.reflectance / (A - 1)
    Path(path).write_bytes(rec.tobytes())


def read_ascii_points(path, A=None) -> PointCloudFrame:
    """One point per line: ``x y z s``. Blank lines and ``#`` comments are skipped."""
    pos, sym = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                xyz = [float(p) for p in parts[:3]]
                s = int(parts[3])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(c) for c in xyz):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            if A is not None and not 0 <= s < A:
                raise ValidationError(f"{path}:{lineno}: symbol {s} outside [0, {A})")
            pos.append(xyz)
            sym.append(s)
    return PointCloudFrame(np.array(pos, dtype=np.float64).reshape(-1, 3), np.array(sym, dtype=np.int64))


def write_ascii_points(path, frame: PointCloudFrame):
    """Canonical form: shortest round-trip float repr, single spaces, ``\\n``."""
    with open(path, "w") as fh:
        for (x, y, z), s in zip(frame.positions.tolist(), frame.reflectance.tolist()):
            fh.write(f"{x!r} {y!r} {z!r} {s}\n")


def read_frame(path, fmt=None, A=100) -> PointCloudFrame:
    fmt = fmt or ("bin" if str(path).endswith(".bin") else "ascii")
    if fmt == "bin":
        return read_kitti_bin(path, A)
    if fmt == "ascii":
        return read_ascii_points(path, A)
    raise ValidationError(f"unknown frame format {fmt!r}")


def write_frame(path, frame, fmt=None, A=100):
    fmt = fmt or ("bin" if str(path).endswith(".bin") else "ascii")
    if fmt == "bin":
        write_kitti_bin(path, frame, A)
    else:
        write_ascii_points(path, frame)


# ---------------------------------------------------------------- manifests

def write_manifest(path, frame_paths, sensor: SensorConfig, fmt="ascii", spec=None):
    """JSON manifest: frame paths (relative to the manifest), sensor, generator spec."""
    path = Path(path)
    rel = [str(Path(p).resolve().relative_to(path.parent.resolve())) for p in frame_paths]
    doc = {
        "format": fmt,
        "sensor": sensor.to_dict(),
        "frames": rel,
        "spec": spec.to_dict() if spec is not None else None,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path):
    """Returns ``(frame paths, SensorConfig, format, SyntheticSpec or None)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        sensor = SensorConfig(**doc["sensor"])
        frames = [path.parent / p for p in doc["frames"]]
        fmt = doc.get("format", "ascii")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    spec = SyntheticSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    return frames, sensor, fmt, spec


def load_corpus(path):
    frames, sensor, fmt, spec = read_manifest(path)
    return [read_frame(p, fmt, sensor.A) for p in frames], sensor, spec


def write_synthetic_corpus(directory, spec: SyntheticSpec, fmt="ascii"):
    """Generate ``spec`` into ``directory`` with a ``manifest.json``; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(generate_frames(spec)):
        p = directory / f"frame_{i:04d}.{'bin' if fmt == 'bin' else 'txt'}"
        write_frame(p, frame, fmt, spec.sensor.A)
        paths.append(p)
    manifest = directory / "manifest.json"
    write_manifest(manifest, paths, spec.sensor, fmt, spec)
    return manifest
