"""AdamW with cosine-annealed learning rate, written against the flat param dict."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, TrainingError
from .model import Model, forward, log_softmax, loss_and_grads, LN2

log = logging.getLogger(__name__)


def cosine_lr(t, total, lr_max=2e-4, lr_min=5e-5):
    """Learning rate at step ``t`` of ``total``; ``lr_max`` at 0, ``lr_min`` at ``total``."""
    if total <= 0:
        return lr_max
    t = min(max(t, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 64
    lr_max: float = 2e-4
    lr_min: float = 5e-5
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TrainLog:
    epoch_bits: list = field(default_factory=list)  # mean train bits/symbol per epoch
    init_bits: float | None = None
    steps: int = 0
    seconds: float = 0.0


def take(windows, idx):
    return {k: v[idx] for k, v in windows.items()}


def train_step(model: Model, batch, opt: AdamW, lr, mask=frozenset()):
    """One AdamW update on mean bits/symbol of ``batch``; returns the loss."""
    n = float(batch["valid"].sum())
    if n == 0:
        return 0.0
    loss, grads = loss_and_grads(model, batch, mask, scale=1.0 / n)
    if not math.isfinite(loss):
        raise NumericError("loss is not finite")
    with np.errstate(over="ignore", invalid="ignore"):
        opt.step(model.params, grads, lr)
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"update made parameter {k} non-finite")
    return loss


def mean_bits(model: Model, windows, mask=frozenset(), batch_size=256):
    """Teacher-forced mean bits/symbol over all valid positions of ``windows``."""
    total, count = 0.0, 0.0
    n = len(windows["sym"])
    for s in range(0, n, batch_size):
        b = take(windows, slice(s, s + batch_size))
        logits, _ = forward(model, b, mask)
        logp = log_softmax(logits.astype(np.float64))
        picked = np.take_along_axis(logp, b["sym"][..., None], axis=-1)[..., 0]
        total -= float((picked * b["valid"]).sum()) / LN2
        count += float(b["valid"].sum())
    return total / max(count, 1.0)


def fit(model: Model, windows, cfg: TrainConfig = TrainConfig(), mask=frozenset(),
        progress=None) -> TrainLog:
    """Train ``model`` in place on a window dict (see ``codec.stack_windows``)."""
    rng = np.random.default_rng(cfg.seed)
    n = len(windows["sym"])
    per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total = per_epoch * cfg.epochs
    opt = AdamW(model.params, weight_decay=cfg.weight_decay)
    out = TrainLog()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        bits, syms = 0.0, 0.0
        for s in range(0, n, cfg.batch_size):
            batch = take(windows, order[s:s + cfg.batch_size])
            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
            snapshot = {k: v.copy() for k, v in model.params.items()}
            try:
                loss = train_step(model, batch, opt, lr, mask)
            except NumericError as exc:
                model.params.update(snapshot)
                raise TrainingError(f"diverged at epoch {epoch} step {step}: {exc}", snapshot) from exc
            k = float(batch["valid"].sum())
            bits += loss * k
            syms += k
            step += 1
        out.epoch_bits.append(bits / max(syms, 1.0))
        log.info("epoch %d: %.4f bits/symbol (lr %.2e)", epoch, out.epoch_bits[-1], lr)
        if progress is not None:
            progress(epoch, out.epoch_bits[-1])
    out.steps = step
    out.seconds = time.perf_counter() - t0
    return out
