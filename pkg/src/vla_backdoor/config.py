"""Experiment configuration: one strict, versioned JSON document describes a full run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attack import DPConfig, JointConfig, MPConfig, Stage1Config, Stage2Config
from .env_sim import SUITES
from .pipeline import DataConfig, PretrainConfig
from .trigger import ANCHORS, SIZE_FRACTIONS, TriggerError, TriggerSpec
from .vla_model import ModelConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    episodes: int = 60
    trajectory_examples: int = 3
    feature_samples: int = 2000

    def __post_init__(self):
        if self.episodes < 20:
            raise ValueError("at least 20 evaluation episodes are required")
        if self.trajectory_examples < 0 or self.feature_samples < 1:
            raise ValueError("trajectory_examples must be >= 0 and feature_samples >= 1")


@dataclass
class SweepConfig:
    trigger_kinds: list = field(default_factory=lambda: ["patch"])
    position_grid: bool = True
    position_suite: str = "goal"
    sizes: list = field(default_factory=lambda: list(SIZE_FRACTIONS))
    anchors: list = field(default_factory=lambda: list(ANCHORS))
    defense_suites: list = field(default_factory=lambda: ["long"])
    jpeg: list = field(default_factory=lambda: [100, 80, 60, 40, 20])
    noise: list = field(default_factory=lambda: [0.0, 0.02, 0.04, 0.06, 0.08])
    reft_pairs: list = field(default_factory=lambda: [["long", "goal"], ["goal", "object"],
                                                      ["object", "spatial"], ["spatial", "long"]])

    def __post_init__(self):
        for k in self.trigger_kinds:
            if k not in ("patch", "rendered_object"):
                raise ValueError(f"unknown trigger kind {k!r}")
        if self.position_suite not in SUITES:
            raise ValueError(f"unknown suite {self.position_suite!r}")
        for f in self.sizes:
            if f not in SIZE_FRACTIONS:
                raise ValueError(f"size fraction {f!r} must be one of {SIZE_FRACTIONS}")
        for a in self.anchors:
            if a not in ANCHORS:
                raise ValueError(f"unknown anchor {a!r}")
        for s in self.defense_suites:
            if s not in SUITES:
                raise ValueError(f"unknown suite {s!r}")
        for q in self.jpeg:
            if not (isinstance(q, int) and 1 <= q <= 100):
                raise ValueError(f"jpeg quality {q!r} must be an integer in [1, 100]")
        for e in self.noise:
            if not e >= 0:
                raise ValueError("noise levels must be >= 0")
        pairs = []
        for p in self.reft_pairs:
            if len(p) != 2 or p[0] not in SUITES or p[1] not in SUITES:
                raise ValueError(f"bad re-finetuning pair {p!r}")
            pairs.append([str(p[0]), str(p[1])])
        self.reft_pairs = pairs


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "dp": DPConfig,
    "mp": MPConfig,
    "joint": JointConfig,
    "eval": EvalConfig,
    "sweeps": SweepConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    suites: list = field(default_factory=lambda: list(SUITES))
    out_dir: str = "runs/default"
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    dp: DPConfig = field(default_factory=DPConfig)
    mp: MPConfig = field(default_factory=MPConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweeps: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if not self.suites or any(s not in SUITES for s in self.suites):
            raise ConfigError(f"suites must be a nonempty subset of {SUITES}")

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "seed": self.seed, "suites": list(self.suites),
             "out_dir": self.out_dir, "trigger": self.trigger.to_dict()}
        for name in _SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
        known = {"schema_version", "seed", "suites", "out_dir", "trigger", *_SECTIONS}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        try:
            for name, typ in _SECTIONS.items():
                if name in d:
                    sec = d[name]
                    if not isinstance(sec, dict):
                        raise ConfigError(f"section {name!r} must be an object")
                    allowed = {f.name for f in fields(typ)}
                    bad = set(sec) - allowed
                    if bad:
                        raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
                    kw[name] = typ(**sec)
            if "trigger" in d:
                t = d["trigger"]
                allowed = {"kind", "anchor", "size_fraction", "epsilon", "learnable", "checker_cell"}
                if not isinstance(t, dict) or set(t) - allowed:
                    raise ConfigError(f"trigger must be an object with keys from {sorted(allowed)}")
                kw["trigger"] = TriggerSpec.from_dict(t)
                if kw["trigger"].size_fraction not in SIZE_FRACTIONS:
                    raise ConfigError(f"trigger size_fraction must be one of {SIZE_FRACTIONS}")
            for k in ("seed", "suites", "out_dir"):
                if k in d:
                    kw[k] = d[k]
            if "seed" in kw and not isinstance(kw["seed"], int):
                raise ConfigError("seed must be an integer")
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, TriggerError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)
