"""Trained models and corpora shared by the acceptance suite.

Training the light preset takes minutes, so trained checkpoints are cached
under pytest's cache directory. The cache key covers the corpus spec, the
model and training configs and the package source, so any code change
retrains. ``pytest --cache-clear`` forces a fresh run.
"""

import hashlib
import json
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

import lidarcodec
from lidarcodec.codec import concat_windows, encode_frame, measure_bpp, stack_windows
from lidarcodec.config import preset
from lidarcodec.data import DISTANCE_ONLY, SYNTH_SENSOR, SyntheticSpec, generate_frames
from lidarcodec.geom import serialize
from lidarcodec.ssm import load, new_model, save
from lidarcodec.ssm.train import TrainConfig, fit, mean_bits

SENSOR = SYNTH_SENSOR
LIGHT = preset("light", A=SENSOR.A)

DEFAULT_TRAIN = SyntheticSpec(seed=0, frames=8)
DEFAULT_EVAL = replace(DEFAULT_TRAIN, seed=1000, frames=4)
DISTANCE_TRAIN = replace(DISTANCE_ONLY, seed=0, frames=8)
DISTANCE_EVAL = replace(DISTANCE_TRAIN, seed=1000, frames=4)

TRAINING = TrainConfig(epochs=25, batch_size=64, lr_max=1e-3, lr_min=2.5e-4, seed=0)


def _source_digest():
    h = hashlib.sha256()
    root = Path(lidarcodec.__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def windows_for(frames, window):
    return concat_windows([stack_windows(serialize(f, SENSOR), window, SENSOR) for f in frames])


def trained_model(cache_dir: Path, spec: SyntheticSpec, cfg=LIGHT, train=TRAINING):
    """``(model, info)``; ``info`` records training time and per-epoch bits."""
    key = hashlib.sha256(json.dumps({
        "spec": spec.to_dict(), "model": cfg.to_dict(), "train": asdict(train),
        "source": _source_digest(),
    }, sort_keys=True).encode()).hexdigest()[:20]
    ckpt = cache_dir / f"{key}.ckpt"
    meta = cache_dir / f"{key}.json"
    if ckpt.exists() and meta.exists():
        info = json.loads(meta.read_text())
        info["cached"] = True
        return load(ckpt), info
    model = new_model(cfg, SENSOR, seed=train.seed)
    windows = windows_for(generate_frames(spec), cfg.window)
    t0 = time.perf_counter()
    init_bits = mean_bits(model, windows)
    log = fit(model, windows, train)
    info = {
        "seconds": time.perf_counter() - t0, "init_bits": init_bits,
        "epoch_bits": log.epoch_bits, "steps": log.steps, "windows": int(len(windows["sym"])),
        "cached": False,
    }
    cache_dir.mkdir(parents=True, exist_ok=True)
    save(model, ckpt)
    meta.write_text(json.dumps(info))
    return model, info


def coded_bpp(model, frames, window=None, mask=frozenset(), workers=1):
    """Pooled ``(container bpp, payload bpp, stats list)`` over ``frames``."""
    n = bits_c = bits_p = 0.0
    stats = []
    for f in frames:
        bs = encode_frame(f, SENSOR, model, window=window, workers=workers, mask=mask)
        c, p = measure_bpp(bs)
        n += f.n
        bits_c += c * f.n
        bits_p += p * f.n
        stats.append(bs.stats)
    return bits_c / n, bits_p / n, stats
