"""Input-perturbation defenses (blockwise DCT compression, Gaussian noise) and downstream re-finetuning."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attack import Stage2Config
from .env_sim import Dataset, ObsTransform
from .eval import DEFAULT_EPISODES, MetricsReport, fmt_rate, run_eval
from .trigger import TriggerSpec
from .vla_model import VLAModel, train_clean

log = logging.getLogger(__name__)

BLOCK = 8
QUALITIES = (100, 80, 60, 40, 20)
NOISE_LEVELS = (0.0, 0.02, 0.04, 0.06, 0.08)
DEFENSE_COLUMNS = ("defense", "level", "sr_wo", "sr_w", "asr")

# standard 8x8 luminance quantization table, row-major
LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64).reshape(8, 8)


@dataclass(frozen=True)
class CompressionConfig:
    quality: int = 80
    block: int = BLOCK

    def __post_init__(self):
        if not 1 <= int(self.quality) <= 100:
            raise ValueError("quality must lie in [1, 100]")
        if self.block != BLOCK:
            raise ValueError("only 8x8 blocks are supported")


@dataclass(frozen=True)
class NoiseConfig:
    level: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if not self.level >= 0:
            raise ValueError("noise level must be >= 0")


def quality_scale(quality: int) -> int:
    q = int(quality)
    return 5000 // q if q < 50 else 200 - 2 * q


def scaled_table(quality: int, base: np.ndarray = LUMA_TABLE) -> np.ndarray:
    s = quality_scale(quality)
    return np.clip((base * s + 50) // 100, 1, 255).astype(np.int64)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis: rows are frequencies."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    c = np.cos(math.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    c[0] /= math.sqrt(2.0)
    return c


_D = dct_matrix()


def to_blocks(channel: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    return channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def block_dct(channel: np.ndarray) -> np.ndarray:
    return _D @ to_blocks(channel) @ _D.T


def block_idct(coeffs: np.ndarray) -> np.ndarray:
    return from_blocks(_D.T @ coeffs @ _D)


def jpeg_roundtrip(image: np.ndarray, cfg: CompressionConfig) -> np.ndarray:
    """Lossy stage of a baseline JPEG codec applied to each RGB channel.

    Coefficients are quantized by truncation toward zero, so no coefficient grows in
    magnitude; there is no chroma transform, subsampling or entropy coding.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] % BLOCK or img.shape[1] % BLOCK:
        raise ValueError(f"image shape {img.shape} is not H x W x C with H, W multiples of {BLOCK}")
    table = scaled_table(cfg.quality).astype(np.float64)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        coeffs = block_dct(img[:, :, ch] * 255.0 - 128.0)
        coeffs = np.fix(coeffs / table) * table
        out[:, :, ch] = block_idct(coeffs) + 128.0
    return np.clip(out / 255.0, 0.0, 1.0).astype(np.float32)


def ac_energy(channel: np.ndarray) -> np.ndarray:
    """Per-block energy of the non-DC coefficients (pixel scale of the input)."""
    c = block_dct(np.asarray(channel, dtype=np.float64))
    return np.sum(c ** 2, axis=(-2, -1)) - c[..., 0, 0] ** 2


def gaussian_perturb(image: np.ndarray, cfg: NoiseConfig, key: tuple = ()) -> np.ndarray:
    """image + level * N(0, 1), clamped; the draw depends only on (seed, key)."""
    img = np.asarray(image, dtype=np.float32)
    if cfg.level == 0:
        return img.copy()
    rng = np.random.default_rng([int(cfg.seed), *[int(k) for k in key]])
    noise = rng.standard_normal(img.shape).astype(np.float32)
    return np.clip(img + np.float32(cfg.level) * noise, 0.0, 1.0)


def make_transform(kind: str, level, seed: int = 0) -> ObsTransform | None:
    """Observation transform for rollouts; None when the level is the identity."""
    if kind == "jpeg":
        cfg = CompressionConfig(int(level))
        return lambda img, key: jpeg_roundtrip(img, cfg)
    if kind == "noise":
        ncfg = NoiseConfig(float(level), seed)
        if ncfg.level == 0:
            return None
        return lambda img, key: gaussian_perturb(img, ncfg, key)
    raise ValueError(f"unknown defense {kind!r}")


@dataclass
class DefenseRow:
    defense: str
    level: float
    report: MetricsReport

    def to_dict(self) -> dict:
        return {"defense": self.defense, "level": self.level, **self.report.to_dict()}


def evaluate_under_defense(model: VLAModel, baseline: VLAModel, suite: str, kind: str, levels: Sequence,
                           spec: TriggerSpec, n_episodes: int = DEFAULT_EPISODES, seed: int = 0,
                           strict: bool = True) -> list[DefenseRow]:
    """One report per level, with the transform applied to every observation either model sees."""
    if len(levels) == 0:
        raise ValueError("no defense levels given")
    rows = []
    for level in levels:
        tf = make_transform(kind, level, seed)
        rep = run_eval(model, baseline, suite, spec, n_episodes, seed, transform=tf, strict=strict).report
        rows.append(DefenseRow(kind, float(level), rep))
    return rows


def write_defense_csv(path, rows: Sequence[DefenseRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DEFENSE_COLUMNS)
        for r in rows:
            w.writerow([r.defense, f"{r.level:g}", f"{r.report.sr_wo:.4f}", f"{r.report.sr_w:.4f}",
                        fmt_rate(r.report.asr)])


def refinetune(model: VLAModel, target_dataset: Dataset, cfg: Stage2Config, target_suite: str | None = None,
               source_suite: str | None = None) -> list[dict]:
    """Benign downstream fine-tuning on clean target data; every parameter group is trainable."""
    if source_suite is not None and source_suite == target_suite:
        log.warning("re-finetuning on the source suite %s", source_suite)
    return train_clean(model, target_dataset, cfg.steps, cfg.lr, cfg.batch_size, cfg.seed)
