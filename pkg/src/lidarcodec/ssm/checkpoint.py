"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes  b"LRCCKPT\\0"
    version   u16
    meta_len  u32, then meta_len bytes of UTF-8 JSON {"model": ..., "sensor": ...}
    count     u32
    count x tensor, sorted by name:
        name_len u16, name (UTF-8)
        dtype    u8   (1 = float32, 2 = float64)
        ndim     u8,  then ndim x u32 shape
        data     C-order little-endian values
    checksum  32 bytes SHA-256 of everything above

The checksum doubles as the model digest written into bitstream headers.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..config import ModelConfig
from ..errors import ConfigurationError, FormatError, IntegrityError
from ..geom import SensorConfig

MAGIC = b"LRCCKPT\x00"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _body(model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    meta = json.dumps(
        {"model": model.config.to_dict(), "sensor": model.sensor.to_dict()},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.asarray(model.params[name])
        if arr.dtype not in _CODES:
            raise ConfigurationError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return buf.getvalue()


def to_bytes(model) -> bytes:
    body = _body(model)
    return body + hashlib.sha256(body).digest()


def model_digest(model) -> bytes:
    return hashlib.sha256(_body(model)).digest()


def from_bytes(data: bytes):
    from .model import Model

    if len(data) < len(MAGIC) + 2 + 32 or data[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, checksum = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise IntegrityError("checkpoint checksum mismatch")
    pos = 8
    (version,) = struct.unpack_from("<H", body, pos)
    pos += 2
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise FormatError(f"unknown dtype code {code} for tensor {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        params[name] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return Model(ModelConfig.from_dict(meta["model"]), SensorConfig(**meta["sensor"]), params)


def save(model, path) -> bytes:
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return data[-32:]


def load(path):
    return from_bytes(Path(path).read_bytes())
