from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from .errors import ValidationError

CONTEXT_COMPONENTS = ("v", "u", "rho", "x")
# ablation names as exposed on the command line -> token slices they cover
ABLATION_GROUPS = {"pos": ("v", "u"), "rho": ("rho",), "prev": ("x",)}


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters that fix every tensor shape of the entropy model.

    ``split`` is the per-component token width ``(v, u, rho, x)``; ``None``
    means equal quarters of ``D``.
    """

    D: int = 256
    S: int = 5
    window: int = 128
    ssm_state: int = 16
    expand: int = 2
    conv_k: int = 4
    A: int = 100
    split: tuple | None = None

    def __post_init__(self):
        for name in ("D", "S", "window", "ssm_state", "expand", "conv_k", "A"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ValidationError(f"{name} must be a positive integer, got {val}")
        if self.split is None:
            if self.D % 4:
                raise ValidationError(f"D={self.D} is not divisible by 4")
        else:
            split = tuple(int(s) for s in self.split)
            if len(split) != 4 or min(split) < 0 or sum(split) != self.D:
                raise ValidationError(f"split {self.split} must be 4 widths summing to D={self.D}")
            object.__setattr__(self, "split", split)
        if self.A < 2:
            raise ValidationError("alphabet size must be >= 2")

    @property
    def dims(self) -> tuple:
        if self.split is None:
            q = self.D // 4
            return (q, q, q, q)
        return self.split

    @property
    def inner(self) -> int:
        return self.expand * self.D

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.D / 16)

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split) if self.split is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("split") is not None:
            d["split"] = tuple(d["split"])
        return cls(**d)

    def without(self, components) -> "ModelConfig":
        """Config whose token drops ``components`` and shares their width out.

        The remaining components get equal shares of ``D``; the remainder of
        the integer division goes to the earliest remaining components.
        """
        drop = set()
        for c in components:
            drop.update(ABLATION_GROUPS.get(c, (c,)))
        unknown = drop - set(CONTEXT_COMPONENTS)
        if unknown:
            raise ValidationError(f"unknown context components {sorted(unknown)}")
        keep = [c for c in CONTEXT_COMPONENTS if c not in drop]
        if not keep:
            raise ValidationError("cannot ablate every context component")
        base, extra = divmod(self.D, len(keep))
        widths = []
        for c in CONTEXT_COMPONENTS:
            if c in drop:
                widths.append(0)
            else:
                widths.append(base + (1 if extra > 0 else 0))
                extra -= 1
        return replace(self, split=tuple(widths))


PRESETS = {
    "standard": ModelConfig(D=256, S=5, window=128),
    "light": ModelConfig(D=64, S=3, window=32),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)
