"""Optimizers and learning-rate schedules.

All four update rules act in place on :class:`~bnndl.binary.Parameter`
values. Latent binary weights are clipped to [-1, 1] after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..binary import clip_latent
from ..errors import ConfigError, NumericError

KINDS = ("adam", "sgd_momentum", "nesterov", "rmsprop")
SCHEDULES = ("exp", "step", "const")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 5e-3
    schedule: str = "exp"
    # exp: geometric decay from lr to lr_final over the run
    lr_final: float = 1.5e-5
    # step: multiply by decay_factor at each listed epoch
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    rms_alpha: float = 0.99
    weight_decay: float = 0.0
    decay_latent: bool = False
    decay_bn: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.lr <= 0 or self.lr_final <= 0 or self.lr_scale <= 0:
            raise ConfigError("learning rates must be positive")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing: {self.decay_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        """Learning rate for 0-based ``epoch`` of a ``total_epochs`` run."""
        if self.schedule == "const":
            lr = self.lr
        elif self.schedule == "step":
            lr = self.lr * self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)
        else:
            span = max(total_epochs - 1, 1)
            lr = self.lr * (self.lr_final / self.lr) ** (epoch / span)
        return lr * self.lr_scale


@dataclass
class _Slot:
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class Optimizer:
    params: list
    cfg: OptimizerConfig
    t: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = [p if isinstance(p, tuple) else (getattr(p, "name", None) or f"param{i}", p)
                       for i, p in enumerate(self.params)]

    def _decays(self, p) -> bool:
        if self.cfg.weight_decay == 0:
            return False
        kind = getattr(p, "kind", "real")
        if kind == "latent":
            return self.cfg.decay_latent
        if kind == "bn":
            return self.cfg.decay_bn
        return True

    def step(self, lr: float) -> None:
        cfg = self.cfg
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self._decays(p):
                g = g + cfg.weight_decay * p.values
            slot = self.slots.setdefault(name, _Slot())
            if cfg.kind == "adam":
                if slot.m is None:
                    slot.m = np.zeros_like(p.values)
                    slot.v = np.zeros_like(p.values)
                slot.m = cfg.beta1 * slot.m + (1 - cfg.beta1) * g
                slot.v = cfg.beta2 * slot.v + (1 - cfg.beta2) * g * g
                mhat = slot.m / (1 - cfg.beta1 ** self.t)
                vhat = slot.v / (1 - cfg.beta2 ** self.t)
                update = lr * mhat / (np.sqrt(vhat) + cfg.eps)
            elif cfg.kind in ("sgd_momentum", "nesterov"):
                slot.m = g.copy() if slot.m is None else cfg.momentum * slot.m + g
                update = lr * (g + cfg.momentum * slot.m if cfg.kind == "nesterov" else slot.m)
            else:
                if slot.v is None:
                    slot.v = np.zeros_like(p.values)
                slot.v = cfg.rms_alpha * slot.v + (1 - cfg.rms_alpha) * g * g
                update = lr * g / (np.sqrt(slot.v) + cfg.eps)
            p.values -= update.astype(p.values.dtype)
        clip_latent(p for _, p in self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for name, slot in self.slots.items():
            if slot.m is not None:
                out[f"{name}.m"] = slot.m
            if slot.v is not None:
                out[f"{name}.v"] = slot.v
        return out
