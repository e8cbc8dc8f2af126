"""Trigger patterns, placement and patch compositing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn_core import Tensor, add, clip, place

KINDS = ("patch", "rendered_object")
ANCHORS = ("center", "top_left", "bottom_right")
SIZE_FRACTIONS = (0.01, 0.05, 0.10)
TRIGGER_COLOR = (1.0, 0.0, 1.0)


class TriggerError(ValueError):
    pass


def patch_side(fraction: float, height: int = 32, width: int = 32) -> int:
    return int(math.floor(math.sqrt(fraction * height * width) + 1e-9))


def checkerboard(side: int, epsilon: float, cell: int = 1) -> np.ndarray:
    """Signed checkerboard scaled so that its squared L2 norm is 0.99 * epsilon."""
    ij = np.add.outer(np.arange(side) // cell, np.arange(side) // cell)
    sign = np.where(ij % 2 == 0, 1.0, -1.0)
    pat = np.repeat(sign[:, :, None], 3, axis=2)
    pat *= math.sqrt(0.99 * epsilon / pat.size)
    return pat.astype(np.float32)


def project_to_ball(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale ``delta`` back onto {||d||^2 <= epsilon} if it lies outside."""
    sq = float(np.sum(delta.astype(np.float64) ** 2))
    if sq <= epsilon:
        return delta
    return (delta * math.sqrt(epsilon / sq) * (1 - 1e-6)).astype(np.float32)


@dataclass
class TriggerSpec:
    kind: str = "patch"
    anchor: str | tuple[int, int] = "bottom_right"
    size_fraction: float = 0.05
    epsilon: float = 4.0
    learnable: bool = False
    pattern: np.ndarray | None = field(default=None, repr=False)
    checker_cell: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TriggerError(f"unknown trigger kind {self.kind!r}")
        if isinstance(self.anchor, list):
            self.anchor = tuple(self.anchor)
        if not isinstance(self.anchor, tuple) and self.anchor not in ANCHORS:
            raise TriggerError(f"unknown anchor {self.anchor!r}")
        if not 0 < self.size_fraction <= 1:
            raise TriggerError("size fraction must lie in (0, 1]")
        if self.pattern is None:
            self.pattern = checkerboard(self.side, self.epsilon, self.checker_cell)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.pattern.ndim != 3 or self.pattern.shape[2] != 3:
            raise TriggerError("pattern must be h x w x 3")
        if self.sq_norm > self.epsilon * (1 + 1e-5):
            raise TriggerError(f"pattern norm {self.sq_norm:.3f} exceeds epsilon {self.epsilon}")

    @property
    def side(self) -> int:
        if self.pattern is not None:
            return self.pattern.shape[0]
        return patch_side(self.size_fraction)

    @property
    def sq_norm(self) -> float:
        return float(np.sum(self.pattern.astype(np.float64) ** 2))

    def origin(self, height: int = 32, width: int = 32) -> tuple[int, int]:
        h, w = self.pattern.shape[:2]
        if isinstance(self.anchor, tuple):
            r, c = self.anchor
        elif self.anchor == "center":
            r, c = (height - h) // 2, (width - w) // 2
        elif self.anchor == "top_left":
            r, c = 0, 0
        else:
            r, c = height - h, width - w
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise TriggerError(f"trigger footprint at {(r, c)} size {(h, w)} leaves the image")
        return r, c

    def footprint(self, height: int = 32, width: int = 32) -> tuple[slice, slice]:
        r, c = self.origin(height, width)
        h, w = self.pattern.shape[:2]
        return slice(r, r + h), slice(c, c + w)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "anchor": list(self.anchor) if isinstance(self.anchor, tuple) else self.anchor,
            "size_fraction": self.size_fraction,
            "epsilon": self.epsilon,
            "learnable": self.learnable,
            "checker_cell": self.checker_cell,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(**{k: d[k] for k in ("kind", "anchor", "size_fraction", "epsilon", "learnable", "checker_cell") if k in d})


def apply_trigger(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Composite the patch onto one image (H, W, 3) or a batch (N, H, W, 3)."""
    if spec.kind != "patch":
        raise TriggerError("rendered-object triggers are drawn by the environment renderer")
    out = np.array(images, dtype=np.float32, copy=True)
    rows, cols = spec.footprint(out.shape[-3], out.shape[-2])
    region = out[..., rows, cols, :]
    out[..., rows, cols, :] = np.clip(region + spec.pattern, 0.0, 1.0)
    return out


def apply_trigger_tensor(images: np.ndarray, delta: Tensor, spec: TriggerSpec) -> Tensor:
    """Differentiable compositing with respect to ``delta`` for a batch of images."""
    rows, cols = spec.footprint(images.shape[-3], images.shape[-2])
    placed = place(delta, images.shape[-3:], (rows, cols, slice(None)))
    # pixels outside the footprint are already in [0, 1]; clipping leaves them unchanged
    return clip(add(Tensor(images), placed), 0.0, 1.0)
