"""End-to-end experiment steps shared by the command line and the test suite.

pretrain (all suites, mirrored embodiment, augmented)  ->  per-suite clean twin
(stage-2 protocol on clean data)  |  two-stage attack from the same pretrained model
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import env_sim as E
from .attack import AttackResult, Stage1Config, Stage2Config, odo_attack, stage2_train
from .defense import CompressionConfig, jpeg_roundtrip
from .env_sim import Dataset
from .trigger import TriggerSpec
from .vla_model import Augment, ModelConfig, VLAModel, occlude, train_clean

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    train_episodes: int = 4000
    action_noise: float = 0.3

    def __post_init__(self):
        if self.train_episodes < 1 or self.action_noise < 0:
            raise ValueError("train_episodes must be >= 1 and action_noise >= 0")


@dataclass
class PretrainConfig:
    episodes_per_suite: int = 1500
    steps: int = 20000
    lr: float = 1e-3
    batch_size: int = 64
    occlusion: float = 0.5
    compression: float = 0.5
    min_quality: int = 20

    def __post_init__(self):
        if not (0 <= self.occlusion <= 1 and 0 <= self.compression <= 1):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if not 1 <= self.min_quality <= 100:
            raise ValueError("min_quality must lie in [1, 100]")


def pretrain_augment(cfg: PretrainConfig) -> Augment:
    """Random noise occluders, then random-quality compression, each with its own probability."""

    def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = occlude(images, rng, cfg.occlusion) if cfg.occlusion > 0 else images
        if cfg.compression > 0:
            out = np.array(out, copy=True)
            for i in np.flatnonzero(rng.random(len(out)) < cfg.compression):
                q = int(rng.integers(cfg.min_quality, 101))
                out[i] = jpeg_roundtrip(out[i], CompressionConfig(q))
        return out

    return augment


def paired_augment(cfg: PretrainConfig):
    """The pretraining augmentation applied identically to a clean image and its triggered copy."""
    single = pretrain_augment(cfg)

    def augment(clean: np.ndarray, trig: np.ndarray, rng: np.random.Generator):
        seeds = rng.integers(0, 2 ** 63, size=len(clean))
        c_out = np.empty_like(clean)
        t_out = np.empty_like(trig)
        for i, s in enumerate(seeds):
            c_out[i] = single(clean[i:i + 1], np.random.default_rng(int(s)))[0]
            t_out[i] = single(trig[i:i + 1], np.random.default_rng(int(s)))[0]
        return c_out, t_out

    return augment


def pretraining_corpus(cfg: PretrainConfig, data: DataConfig, seed: int) -> Dataset:
    return E.pretraining_dataset(cfg.episodes_per_suite, seed, action_noise=data.action_noise)


def pretrain(model_cfg: ModelConfig, cfg: PretrainConfig, data: DataConfig, seed: int,
             corpus: Dataset | None = None) -> tuple[VLAModel, list[dict]]:
    """Generic policy: all suites, mirrored embodiment, augmented images."""
    corpus = corpus if corpus is not None else pretraining_corpus(cfg, data, seed)
    model = VLAModel(model_cfg, seed=seed)
    rows = train_clean(model, corpus, cfg.steps, cfg.lr, cfg.batch_size, seed, augment=pretrain_augment(cfg))
    return model, rows


def suite_dataset(suite: str, data: DataConfig, seed: int, trigger: TriggerSpec | None = None) -> Dataset:
    return E.generate_dataset(suite, data.train_episodes, seed, trigger=trigger, action_noise=data.action_noise)


def clean_twin(pretrained: VLAModel, dataset: Dataset, cfg: Stage2Config) -> tuple[VLAModel, list[dict]]:
    """The clean companion: the stage-2 protocol applied to the pretrained model with no stage 1."""
    model = pretrained.copy()
    rows = stage2_train(model, dataset, cfg)
    return model, rows


def run_odo(pretrained: VLAModel, dataset: Dataset, spec: TriggerSpec, s1: Stage1Config, s2: Stage2Config,
            pcfg: PretrainConfig | None = None, skip_stage2: bool = False,
            triggered_images: np.ndarray | None = None) -> AttackResult:
    """Two-stage attack from a copy of the pretrained model; stage-1 pairs see the pretraining augmentation."""
    aug = paired_augment(pcfg) if pcfg is not None and not spec.learnable else None
    return odo_attack(pretrained.copy(), dataset, spec, s1, s2, skip_stage2, triggered_images, aug)


def as_dict(cfg) -> dict:
    return asdict(cfg)
