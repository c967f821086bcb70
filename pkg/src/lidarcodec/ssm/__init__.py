"""Selective state-space entropy model, its reverse pass and trainer."""

from .checkpoint import load, model_digest, save
from .model import (
    Model,
    StepDecoder,
    forward,
    init_params,
    loss_and_grads,
    new_model,
    nll_bits,
    pmf_head,
    teacher_forced_prev,
    window_pmfs,
)

__all__ = [
    "Model",
    "StepDecoder",
    "forward",
    "init_params",
    "load",
    "loss_and_grads",
    "model_digest",
    "new_model",
    "nll_bits",
    "pmf_head",
    "save",
    "teacher_forced_prev",
    "window_pmfs",
]
