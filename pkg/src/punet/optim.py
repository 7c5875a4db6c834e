"""SGD with momentum/weight decay, learning-rate schedules and named presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InvalidConfig, NumericalOverflow


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float | None = None  # global L2 norm; None disables

    def validate(self):
        if not self.lr >= 0:
            raise InvalidConfig(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidConfig("grad_clip must be positive")
        return self


class SGD:
    """Heavy-ball SGD.

    For each parameter: ``g = grad + wd * p``, ``v = momentum * v + g``,
    ``p = p - lr * v``.  Velocity buffers are created lazily as zeros.
    """

    def __init__(self, params, cfg: SGDConfig):
        self.params = list(params)
        self.cfg = replace(cfg).validate()  # private copy; lr changes stay local
        self.velocity: dict[int, np.ndarray] = {}

    @property
    def lr(self):
        return self.cfg.lr

    @lr.setter
    def lr(self, value):
        self.cfg.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def clip_scale(self) -> float:
        if self.cfg.grad_clip is None:
            return 1.0
        total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params if p.grad is not None))
        return min(1.0, self.cfg.grad_clip / (total + 1e-12))

    def step(self):
        cfg = self.cfg
        scale = self.clip_scale()
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            v = self.velocity.get(i)
            v = g.copy() if v is None else cfg.momentum * v + g
            if cfg.momentum:
                self.velocity[i] = v
            with np.errstate(over="ignore", invalid="ignore"):
                new = p.data - cfg.lr * v
            if not np.all(np.isfinite(new)):
                raise NumericalOverflow(f"parameter {i} became non-finite after update", {"op": "sgd_step"})
            p.data = new.astype(p.dtype, copy=False)


def sgd_step(params, cfg: SGDConfig, velocity: dict | None = None) -> dict:
    """Single functional update; returns the (possibly new) velocity dict."""
    opt = SGD(params, cfg)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity


@dataclass
class ScheduleSpec:
    kind: str = "multistep"  # "multistep" | "plateau" | "constant"
    milestones: list[int] = field(default_factory=list)
    factor: float = 0.1
    patience: int = 3

    def validate(self):
        if self.kind not in ("multistep", "plateau", "constant"):
            raise InvalidConfig(f"unknown schedule {self.kind!r}")
        if not 0 < self.factor < 1:
            raise InvalidConfig("schedule factor must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise InvalidConfig("milestones must be strictly increasing")
        if self.patience < 1:
            raise InvalidConfig("patience must be >= 1")
        return self


class Scheduler:
    """Epoch-level learning-rate controller.

    ``step(epoch, val_loss)`` is called after epoch ``epoch`` (1-based) has
    finished and returns the learning rate for the next epoch.
    """

    def __init__(self, spec: ScheduleSpec, base_lr: float):
        self.spec = spec.validate()
        self.base_lr = base_lr
        self.lr = base_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float | None = None) -> float:
        s = self.spec
        if s.kind == "multistep":
            drops = sum(1 for m in s.milestones if m <= epoch)
            self.lr = self.base_lr * s.factor**drops
        elif s.kind == "plateau":
            if val_loss is not None and val_loss < self.best:
                self.best = val_loss
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
            if self.bad_epochs >= s.patience:
                self.lr *= s.factor
                self.bad_epochs = 0
        return self.lr


def schedule_step(sched: Scheduler, epoch: int, val_loss: float | None = None) -> float:
    return sched.step(epoch, val_loss)


@dataclass
class TrainConfig:
    sgd: SGDConfig = field(default_factory=SGDConfig)
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec("constant"))
    epochs: int = 10
    batch_size: int = 128
    eval_batch_size: int = 256

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            sgd=SGDConfig(**d["sgd"]),
            schedule=ScheduleSpec(**d["schedule"]),
            **{k: v for k, v in d.items() if k not in ("sgd", "schedule")},
        )


PRESETS: dict[str, TrainConfig] = {
    "galaxy-pure": TrainConfig(SGDConfig(0.01, 0.9, 0.01), ScheduleSpec("plateau", factor=0.1, patience=3), 30, 64),
    "galaxy-resnet": TrainConfig(SGDConfig(0.1, 0.9, 0.001), ScheduleSpec("plateau", factor=0.1, patience=3), 30, 64),
    "imagenet-pure": TrainConfig(SGDConfig(0.01, 0.9, 0.001), ScheduleSpec("multistep", [30, 60], 0.1), 90, 256),
    "cifar-pure": TrainConfig(SGDConfig(0.01, 0.9, 0.001), ScheduleSpec("multistep", [80, 120], 0.1), 160, 128),
    "cifar-pure-extended": TrainConfig(SGDConfig(0.01, 0.9, 0.001), ScheduleSpec("multistep", [140, 180], 0.1), 220, 128),
}
PRESET_ALIASES = {"galaxy": "galaxy-pure", "imagenet": "imagenet-pure", "cifar": "cifar-pure"}


def preset(name: str) -> TrainConfig:
    key = PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[key]
    return replace(p, sgd=replace(p.sgd), schedule=replace(p.schedule, milestones=list(p.schedule.milestones)))
