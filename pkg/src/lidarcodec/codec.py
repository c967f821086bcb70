"""Frame encoder/decoder and the bitstream container.

Container layout (all integers little-endian)::

    magic        8 bytes  b"LRCBITS\\0"
    version      u16
    sensor       u32 L, u32 W, f64 phi_up, f64 phi_down, f64 rho_max, u32 A
    window       u32      window size used for partitioning
    ctx_mask     u8       bit0 v, bit1 u, bit2 rho, bit3 prev: slices zeroed
    digest       32 bytes model digest (checkpoint SHA-256)
    n            u64      point count
    counts       L x u32  records per laser sequence
    chunks       u32      directory length
    directory    chunks x (u16 seq, u32 window, u16 valid_len, u64 offset, u32 len)
    payload      concatenated chunk bytes, chunk i at [offset, offset + len)

One chunk per window, ordered by (sequence, window); offsets are
contiguous from 0. Chunks are independent range-coder streams, so any
subset decodes without the others.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import CONTEXT_COMPONENTS
from .entropy import PRECISION, RangeDecoder, RangeEncoder, cumulative, quantize_pmf
from .errors import ConfigurationError, FormatError, IntegrityError, TruncationError, ValidationError
from .geom import PointCloudFrame, SensorConfig, Sequence, SerializedFrame, serialize, serialize_positions
from .ssm.model import Model, StepDecoder
from .tokenizer import START, normalize_radial

MAGIC = b"LRCBITS\x00"
VERSION = 1
_HEAD = struct.Struct("<8sH")
_SENSOR = struct.Struct("<IIdddI")
_MID = struct.Struct("<IB32sQ")
_ENTRY = struct.Struct("<HIHQI")


@dataclass
class Window:
    records: list
    valid_len: int
    window_size: int

    @property
    def padded(self) -> bool:
        return self.valid_len < self.window_size


def partition_windows(sequence, window_size: int) -> list:
    """Cut a record list into consecutive windows of ``window_size``.

    The last window is padded with ``(0, v, 1, 0.0, -1)`` records (symbol 0)
    up to the full size; ``valid_len`` says how many records are real.
    """
    if window_size < 1:
        raise ValidationError("window size must be >= 1")
    records = sequence.records() if isinstance(sequence, Sequence) else list(sequence)
    out = []
    for s in range(0, len(records), window_size):
        chunk = records[s:s + window_size]
        valid = len(chunk)
        if valid < window_size:
            pad = (0, chunk[0][1], 1, 0.0, -1)
            chunk = chunk + [pad] * (window_size - valid)
        out.append(Window(chunk, valid, window_size))
    return out


def stack_windows(sf: SerializedFrame, window: int, sensor: SensorConfig) -> dict:
    """All windows of a serialized frame as ``(B, window)`` arrays.

    Keys: ``v u rho_n sym prev valid`` (per position) and ``seq win
    valid_len`` (per window). Padding positions carry symbol 0, ``u = 1``
    and ``rho = 0``.
    """
    if window < 1:
        raise ValidationError("window size must be >= 1")
    rows_seq, rows_win, rows_start, rows_len = [], [], [], []
    offset = 0
    for l, seq in enumerate(sf.sequences):
        n = len(seq)
        for j, s in enumerate(range(0, n, window)):
            rows_seq.append(l)
            rows_win.append(j)
            rows_start.append(offset + s)
            rows_len.append(min(window, n - s))
        offset += n
    B = len(rows_seq)
    seq_id = np.asarray(rows_seq, dtype=np.int64)
    valid_len = np.asarray(rows_len, dtype=np.int64)
    pos = np.arange(window)
    valid = pos[None, :] < valid_len[:, None]
    if sf.sequences and offset:
        flat_v = np.concatenate([s.v for s in sf.sequences])
        flat_u = np.concatenate([s.u for s in sf.sequences])
        flat_rho = np.concatenate([s.rho for s in sf.sequences])
        flat_sym = np.concatenate([s.symbols for s in sf.sequences])
        idx = np.asarray(rows_start, dtype=np.int64)[:, None] + pos[None, :]
        idx = np.where(valid, idx, 0)
        v = np.where(valid, flat_v[idx], (seq_id + 1)[:, None])
        u = np.where(valid, flat_u[idx], 1)
        rho = np.where(valid, flat_rho[idx], 0.0)
        sym = np.where(valid, flat_sym[idx], 0)
    else:
        v = np.ones((B, window), dtype=np.int64)
        u = np.ones((B, window), dtype=np.int64)
        rho = np.zeros((B, window))
        sym = np.zeros((B, window), dtype=np.int64)
    prev = np.empty_like(sym)
    prev[:, 0] = START
    prev[:, 1:] = sym[:, :-1]
    return {
        "v": v, "u": u, "rho_n": normalize_radial(rho, sensor), "sym": sym, "prev": prev,
        "valid": valid, "seq": seq_id, "win": np.asarray(rows_win, dtype=np.int64),
        "valid_len": valid_len,
    }


def concat_windows(parts) -> dict:
    parts = [p for p in parts if len(p["sym"])]
    if not parts:
        raise ValidationError("no windows to concatenate")
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def mask_bits(mask) -> int:
    return sum(1 << i for i, c in enumerate(CONTEXT_COMPONENTS) if c in mask)


def mask_from_bits(bits: int) -> frozenset:
    return frozenset(c for i, c in enumerate(CONTEXT_COMPONENTS) if bits >> i & 1)


@dataclass
class CodingStats:
    n: int = 0
    windows: int = 0
    nll_bits: float = 0.0        # -sum log2 of the float PMF
    quantized_bits: float = 0.0  # -sum log2 of the integer tables
    payload_bits: int = 0
    t_serialize: float = 0.0
    t_model: float = 0.0
    t_coder: float = 0.0
    window_nll: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Bitstream:
    sensor: SensorConfig
    window: int
    digest: bytes
    n: int
    counts: list
    directory: list  # (seq, window, valid_len, offset, length)
    payload: bytes
    ctx_mask: int = 0
    stats: CodingStats | None = field(default=None, repr=False, compare=False)

    def header_bytes(self) -> bytes:
        out = [_HEAD.pack(MAGIC, VERSION)]
        s = self.sensor
        out.append(_SENSOR.pack(s.L, s.W, s.phi_up, s.phi_down, s.rho_max, s.A))
        out.append(_MID.pack(self.window, self.ctx_mask, self.digest, self.n))
        out.append(struct.pack(f"<{len(self.counts)}I", *self.counts))
        out.append(struct.pack("<I", len(self.directory)))
        out.extend(_ENTRY.pack(*e) for e in self.directory)
        return b"".join(out)

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        pos = 0

        def read(st):
            nonlocal pos
            if pos + st.size > len(data):
                raise TruncationError(f"bitstream ends inside the header at byte {len(data)}")
            vals = st.unpack_from(data, pos)
            pos += st.size
            return vals

        magic, version = read(_HEAD)
        if magic != MAGIC:
            raise FormatError("not a bitstream (bad magic)")
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        try:
            sensor = SensorConfig(*read(_SENSOR))
        except ValidationError as exc:
            raise IntegrityError(f"invalid sensor block: {exc}") from exc
        window, ctx_mask, digest, n = read(_MID)
        counts = list(read(struct.Struct(f"<{sensor.L}I")))
        (nchunks,) = read(struct.Struct("<I"))
        directory = [read(_ENTRY) for _ in range(nchunks)]
        payload = data[pos:]
        bs = cls(sensor, window, digest, n, counts, directory, payload, ctx_mask)
        bs.validate()
        return bs

    def validate(self):
        """Check counts and directory for internal consistency."""
        if self.window < 1:
            raise IntegrityError("window size 0 in header")
        if sum(self.counts) != self.n:
            raise IntegrityError(f"sequence counts sum to {sum(self.counts)}, header says {self.n}")
        expected = [
            (l, j, min(self.window, c - s))
            for l, c in enumerate(self.counts)
            for j, s in enumerate(range(0, c, self.window))
        ]
        if len(expected) != len(self.directory):
            raise IntegrityError(f"directory has {len(self.directory)} chunks, expected {len(expected)}")
        offset = 0
        for exp, (seq, win, vlen, off, length) in zip(expected, self.directory):
            if (seq, win, vlen) != exp:
                raise IntegrityError(f"directory entry {(seq, win, vlen)} where {exp} was expected")
            if off != offset:
                raise IntegrityError(f"chunk ({seq}, {win}) at offset {off}, expected {offset}")
            offset += length
        if offset > len(self.payload):
            raise TruncationError(f"payload has {len(self.payload)} bytes, directory needs {offset}")
        if offset < len(self.payload):
            raise IntegrityError("payload has trailing bytes")

    def chunk(self, i) -> bytes:
        _, _, _, off, length = self.directory[i]
        return self.payload[off:off + length]


def measure_bpp(bs: Bitstream):
    """``(container bpp, payload-only bpp)``."""
    if bs.n <= 0:
        raise ValidationError("bits per point is undefined for an empty frame")
    total = len(bs.header_bytes()) + len(bs.payload)
    return 8.0 * total / bs.n, 8.0 * len(bs.payload) / bs.n


def _check_model(model: Model, sensor: SensorConfig):
    if model.sensor != sensor:
        raise ConfigurationError(f"model was built for {model.sensor}, frame uses {sensor}")


class _Timer:
    def __init__(self):
        self.model = 0.0
        self.coder = 0.0


def _encode_group(model, w, rows, mask, timer):
    """Range-code the windows ``rows`` of stacked arrays ``w``."""
    B = len(rows)
    if B == 0:
        return [], np.zeros(0), np.zeros(0)
    T = w["v"].shape[1]
    v, u, rho_n, sym = (w[k][rows] for k in ("v", "u", "rho_n", "sym"))
    valid_len = w["valid_len"][rows]
    runner = StepDecoder(model, B, mask)
    encoders = [RangeEncoder() for _ in range(B)]
    nll = np.zeros(B)
    qbits = np.zeros(B)
    prev = np.full(B, START, dtype=np.int64)
    ar = np.arange(B)
    for t in range(T):
        live = np.flatnonzero(valid_len > t)
        if len(live) == 0:
            break
        t0 = time.perf_counter()
        pmf = runner.step(v[:, t], u[:, t], rho_n[:, t], prev)
        counts = quantize_pmf(pmf[live])
        t1 = time.perf_counter()
        s = sym[live, t]
        lo = np.take_along_axis(cumulative(counts), s[:, None], axis=1)[:, 0]
        fr = counts[np.arange(len(live)), s]
        for b, c_lo, c_fr in zip(live.tolist(), lo.tolist(), fr.tolist()):
            encoders[b].encode(c_lo, c_fr)
        nll[live] -= np.log2(pmf[live, s].astype(np.float64))
        qbits[live] += PRECISION - np.log2(fr.astype(np.float64))
        prev = sym[ar, t]
        timer.model += t1 - t0
        timer.coder += time.perf_counter() - t1
    t0 = time.perf_counter()
    payloads = [e.finish() for e in encoders]
    timer.coder += time.perf_counter() - t0
    return payloads, nll, qbits


def _decode_group(model, w, rows, chunks, mask, timer):
    B = len(rows)
    T = w["v"].shape[1]
    out = np.zeros((B, T), dtype=np.int64)
    if B == 0:
        return out
    v, u, rho_n = (w[k][rows] for k in ("v", "u", "rho_n"))
    valid_len = w["valid_len"][rows]
    runner = StepDecoder(model, B, mask)
    decoders = [RangeDecoder(c) for c in chunks]
    prev = np.full(B, START, dtype=np.int64)
    for t in range(T):
        live = np.flatnonzero(valid_len > t)
        if len(live) == 0:
            break
        t0 = time.perf_counter()
        pmf = runner.step(v[:, t], u[:, t], rho_n[:, t], prev)
        cum = cumulative(quantize_pmf(pmf[live]))
        t1 = time.perf_counter()
        targets = np.array([decoders[b].target() for b in live.tolist()], dtype=np.int64)
        s = (cum[:, 1:] <= targets[:, None]).sum(axis=1)
        lo = np.take_along_axis(cum, s[:, None], axis=1)[:, 0]
        hi = np.take_along_axis(cum, s[:, None] + 1, axis=1)[:, 0]
        for b, c_lo, c_hi in zip(live.tolist(), lo.tolist(), hi.tolist()):
            decoders[b].consume(c_lo, c_hi - c_lo)
        out[live, t] = s
        prev = out[:, t].copy()
        timer.model += t1 - t0
        timer.coder += time.perf_counter() - t1
    return out


def _groups(B, workers):
    workers = max(1, int(workers))
    return [g for g in np.array_split(np.arange(B), min(workers, max(B, 1))) if len(g)]


def _run(fn, groups, workers):
    if workers <= 1 or len(groups) <= 1:
        return [fn(g) for g in groups]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, groups))


def encode_frame(frame: PointCloudFrame, cfg: SensorConfig, model: Model, window=None,
                 workers=1, mask=frozenset()) -> Bitstream:
    """Compress ``frame.reflectance`` given its geometry.

    Windows are split into ``workers`` contiguous groups coded concurrently;
    the result does not depend on ``workers``.
    """
    _check_model(model, cfg)
    window = model.config.window if window is None else int(window)
    if not 1 <= window <= 0xFFFF:
        raise ValidationError(f"window size {window} outside [1, 65535]")
    if cfg.L > 0x10000:
        raise ValidationError(f"{cfg.L} lasers do not fit the 16-bit sequence id")
    t0 = time.perf_counter()
    sf = serialize(frame, cfg)
    w = stack_windows(sf, window, cfg)
    t_ser = time.perf_counter() - t0
    B = len(w["seq"])
    timers = []

    def job(rows):
        tm = _Timer()
        timers.append(tm)
        return _encode_group(model, w, rows, mask, tm)

    results = _run(job, _groups(B, workers), workers)
    payloads, nll, qbits = [], [], []
    for p, a, b in results:
        payloads.extend(p)
        nll.append(a)
        qbits.append(b)
    nll = np.concatenate(nll) if nll else np.zeros(0)
    qbits = np.concatenate(qbits) if qbits else np.zeros(0)
    directory, offset = [], 0
    for i, p in enumerate(payloads):
        directory.append((int(w["seq"][i]), int(w["win"][i]), int(w["valid_len"][i]), offset, len(p)))
        offset += len(p)
    stats = CodingStats(
        n=frame.n, windows=B, nll_bits=float(nll.sum()), quantized_bits=float(qbits.sum()),
        payload_bits=8 * offset, t_serialize=t_ser,
        t_model=sum(t.model for t in timers), t_coder=sum(t.coder for t in timers),
        window_nll=nll,
    )
    return Bitstream(cfg, window, model.digest, frame.n, sf.counts(), directory,
                     b"".join(payloads), mask_bits(mask), stats)


def _prepare_decode(bs: Bitstream, positions, model: Model):
    if bs.digest != model.digest:
        raise ConfigurationError(
            f"model digest mismatch: bitstream expects {bs.digest.hex()[:16]}..., "
            f"checkpoint has {model.digest.hex()[:16]}..."
        )
    _check_model(model, bs.sensor)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) != bs.n:
        raise IntegrityError(f"geometry has {len(positions)} points, bitstream has {bs.n}")
    sf = serialize_positions(positions, bs.sensor)
    if sf.counts() != list(bs.counts):
        raise IntegrityError("per-laser point counts of the geometry disagree with the header")
    return sf, stack_windows(sf, bs.window, bs.sensor)


def decode_frame(bs: Bitstream, positions, model: Model, workers=1) -> np.ndarray:
    """Reflectance symbols in capture order."""
    bs.validate()
    sf, w = _prepare_decode(bs, positions, model)
    mask = mask_from_bits(bs.ctx_mask)
    B = len(w["seq"])

    def job(rows):
        return _decode_group(model, w, rows, [bs.chunk(i) for i in rows], mask, _Timer())

    decoded = _run(job, _groups(B, workers), workers)
    flat = np.concatenate(decoded, axis=0)[w["valid"]] if B else np.zeros(0, dtype=np.int64)
    out = np.empty(bs.n, dtype=np.int64)
    out[sf.inverse] = flat
    return out


def decode_window(bs: Bitstream, positions, model: Model, seq: int, win: int) -> np.ndarray:
    """Symbols of one window, decoded from its chunk alone, in scan order."""
    bs.validate()
    _, w = _prepare_decode(bs, positions, model)
    hits = np.flatnonzero((w["seq"] == seq) & (w["win"] == win))
    if len(hits) != 1:
        raise IntegrityError(f"no chunk for sequence {seq} window {win}")
    i = int(hits[0])
    grid = _decode_group(model, w, np.array([i]), [bs.chunk(i)],
                         mask_from_bits(bs.ctx_mask), _Timer())
    return grid[0, : int(w["valid_len"][i])]
