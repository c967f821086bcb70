"""Which context slices does a trained model lean on?

Trains a small model, then re-codes held-out frames with one token slice
zeroed at a time. A slice the model relies on costs bits when hidden.

    python demos/context_ablation.py
"""

from lidarcodec.codec import concat_windows, encode_frame, measure_bpp, stack_windows
from lidarcodec.config import ModelConfig
from lidarcodec.data import SYNTH_SENSOR, SyntheticSpec, generate_frames
from lidarcodec.geom import serialize
from lidarcodec.ssm import new_model
from lidarcodec.ssm.train import TrainConfig, fit

sensor = SYNTH_SENSOR
train_frames = generate_frames(SyntheticSpec(seed=0, frames=6, keep_prob=0.15))
held_out = generate_frames(SyntheticSpec(seed=500, frames=2, keep_prob=0.1))

cfg = ModelConfig(D=32, S=2, window=32, ssm_state=8, A=sensor.A)
model = new_model(cfg, sensor, seed=0)
windows = concat_windows([stack_windows(serialize(f, sensor), cfg.window, sensor) for f in train_frames])
fit(model, windows, TrainConfig(epochs=15, batch_size=32, lr_max=3e-3, lr_min=5e-4, seed=0))


def payload_bpp(mask=frozenset()):
    bits = sum(measure_bpp(encode_frame(f, sensor, model, mask=mask))[1] * f.n for f in held_out)
    return bits / sum(f.n for f in held_out)


full = payload_bpp()
print(f"{'hidden slice':<14}{'bpp':>8}{'change':>10}")
print(f"{'none':<14}{full:>8.3f}{'':>10}")
for name, mask in [("laser", {"v"}), ("azimuth", {"u"}), ("range", {"rho"}), ("prev symbol", {"x"})]:
    b = payload_bpp(frozenset(mask))
    print(f"{name:<14}{b:>8.3f}{(b - full) / full:>+10.1%}")
