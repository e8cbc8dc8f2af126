"""Toy vision-language-action policies, two-stage feature-space backdoor injection, and its evaluation."""
from .attack import AttackResult, DPConfig, JointConfig, MPConfig, Stage1Config, Stage2Config, odo_attack
from .config import ConfigError, ExperimentConfig
from .env_sim import SUITES, Dataset, generate_dataset
from .eval import MetricsReport, attack_success_rate, run_eval
from .trigger import TriggerSpec, apply_trigger
from .vla_model import ModelConfig, VLAModel

__version__ = "0.1.0"

__all__ = [
    "AttackResult", "ConfigError", "DPConfig", "Dataset", "ExperimentConfig", "JointConfig", "MPConfig",
    "MetricsReport", "ModelConfig", "SUITES", "Stage1Config", "Stage2Config", "TriggerSpec", "VLAModel",
    "apply_trigger", "attack_success_rate", "generate_dataset", "odo_attack", "run_eval",
]
