"""Shared test utilities: tiny models and a finite-difference gradient oracle."""
import numpy as np

from vla_backdoor.nn_core import precision
from vla_backdoor.trigger import TriggerSpec
from vla_backdoor.vla_model import ModelConfig, VLAModel

TINY = ModelConfig(image_size=8, patch=4, patch_hidden=5, patch_dim=3, vocab_size=10, instr_dim=4,
                   feature_dim=6, backbone_width=7, token_dim=3, bins=6, action_dim=2)


def tiny_model(seed: int) -> VLAModel:
    """Tiny model held in float64 (build inside ``precision(np.float64)``).

    Biases get random values: with all-zero biases a patch whose first-layer units are
    all off lands exactly on the next relu's kink, where central differences disagree.
    """
    model = VLAModel(TINY, seed=seed)
    rng = np.random.default_rng([seed, 3])
    for g in model.groups.values():
        for name, t in g.tensors.items():
            if name.split("_")[-1].startswith("b"):
                t.data = t.data + rng.normal(0.0, 0.3, size=t.shape)
    return model


def tiny_batch(seed: int, n: int = 4):
    rng = np.random.default_rng([seed, 1])
    # keep pixels away from the clip bounds so compositing stays smooth
    images = rng.uniform(0.2, 0.8, size=(n, 8, 8, 3))
    ins = rng.integers(0, TINY.vocab_size, size=(n, 3))
    actions = rng.uniform(-0.95, 0.95, size=(n, TINY.action_dim))
    return images, ins, actions


def tiny_trigger(seed: int) -> TriggerSpec:
    rng = np.random.default_rng([seed, 2])
    pattern = rng.uniform(-0.1, 0.1, size=(2, 2, 3))
    return TriggerSpec(anchor=(5, 5), size_fraction=0.0625, epsilon=1.0, pattern=pattern)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def fd_check(model: VLAModel, loss_fn, groups=("perception", "backbone", "action_head"), h: float = 1e-6,
             max_coords: int = 12, seed: int = 0) -> float:
    """Worst norm-relative error between autodiff and central differences over sampled coordinates.

    ``loss_fn()`` must build a fresh graph each call. Runs in float64.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        model.set_trainable(*groups)
        for g in groups:
            for t in model.groups[g].tensors.values():
                t.grad = None
        loss = loss_fn()
        loss.backward()
        worst = 0.0
        for g in groups:
            for name, t in model.groups[g].tensors.items():
                flat = t.data.reshape(-1)
                idx = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
                analytic = np.zeros(len(idx)) if t.grad is None else t.grad.reshape(-1)[idx]
                numeric = np.empty(len(idx))
                for j, i in enumerate(idx):
                    old = flat[i]
                    flat[i] = old + h
                    up = loss_fn().item()
                    flat[i] = old - h
                    down = loss_fn().item()
                    flat[i] = old
                    numeric[j] = (up - down) / (2 * h)
                if np.linalg.norm(numeric) < 1e-9 and np.linalg.norm(analytic) < 1e-9:
                    continue
                worst = max(worst, rel_err(analytic, numeric))
        return worst


def small_config_dict(out_dir: str, suites=("goal", "long")) -> dict:
    """A full experiment at toy budgets: every command runs in seconds."""
    return {
        "schema_version": 1, "seed": 0, "suites": list(suites), "out_dir": out_dir,
        "data": {"train_episodes": 6},
        "pretrain": {"episodes_per_suite": 3, "steps": 4, "batch_size": 16},
        "stage1": {"steps": 3, "batch_size": 16},
        "stage2": {"steps": 3, "batch_size": 16},
        "dp": {"steps": 2, "batch_size": 16},
        "mp": {"steps": 2, "batch_size": 16},
        "joint": {"steps": 2, "batch_size": 16},
        "eval": {"episodes": 20, "trajectory_examples": 1, "feature_samples": 16},
        "sweeps": {"sizes": [0.05], "anchors": ["center", "bottom_right"], "position_suite": "goal",
                   "defense_suites": ["long"], "jpeg": [40], "noise": [0.04],
                   "reft_pairs": [["long", "goal"]]},
    }
