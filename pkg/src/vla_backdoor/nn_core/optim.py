from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, NumericalError, Tensor

GROUP_NAMES = ("perception", "backbone", "action_head")
AUX_GROUP_NAMES = ("trigger",)


@dataclass
class ParamGroup:
    """Named parameter tensors that are frozen or trained together."""

    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False
    lr_scale: float = 1.0

    def __post_init__(self):
        if self.name not in GROUP_NAMES + AUX_GROUP_NAMES:
            raise ValueError(f"unknown parameter group {self.name!r}")
        self.set_frozen(self.frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for t in self.tensors.values():
            t.requires_grad = not frozen

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=not self.frozen, name=f"{self.name}.{name}")
        self.tensors[name] = t
        return t

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].data.tobytes())
        return h.hexdigest()


def collect_grads(groups) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor; frozen groups get no entry."""
    out = {}
    for g in groups:
        if g.frozen:
            continue
        for name, t in g.tensors.items():
            out[f"{g.name}.{name}"] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


def zero_grads(groups) -> None:
    for g in groups:
        for t in g.tensors.values():
            t.grad = None


@dataclass
class WarmupStepSchedule:
    """Linear warmup to ``base_lr`` followed by multiplicative step decay."""

    base_lr: float
    warmup_steps: int = 0
    decay_every: int = 0
    gamma: float = 0.5

    def __call__(self, step: int) -> float:
        lr = self.base_lr
        if self.warmup_steps > 0 and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        if self.decay_every > 0:
            lr *= self.gamma ** (step // self.decay_every)
        return lr

    @classmethod
    def for_budget(cls, base_lr: float, steps: int) -> "WarmupStepSchedule":
        return cls(base_lr, warmup_steps=max(1, steps // 20), decay_every=max(1, steps // 3), gamma=0.5)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        p = params[name]
        p.data -= DTYPE(lr) * g.astype(DTYPE)


class Adam:
    """Adam over a fixed set of parameter groups; frozen groups are skipped."""

    def __init__(self, groups, schedule, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = list(groups)
        self.schedule = schedule if callable(schedule) else WarmupStepSchedule(float(schedule))
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, Tensor]:
        return {f"{g.name}.{n}": t for g in self.groups for n, t in g.tensors.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> float:
        if grads is None:
            grads = collect_grads(self.groups)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        lr = self.schedule(self.t)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        params = self.params()
        frozen = {f"{g.name}.{n}" for g in self.groups if g.frozen for n in g.tensors}
        scale = {f"{g.name}.{n}": g.lr_scale for g in self.groups for n in g.tensors}
        for name, g in grads.items():
            if name in frozen:
                continue
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= DTYPE(self.b1)
            m += DTYPE(1 - self.b1) * g
            v *= DTYPE(self.b2)
            v += DTYPE(1 - self.b2) * g * g
            p.data -= DTYPE(lr * scale[name]) * (m / DTYPE(c1)) / (np.sqrt(v / DTYPE(c2)) + DTYPE(self.eps))
        return lr
