"""Backdoor injection: the two-stage decoupled attack and three single-phase baselines.

Two-stage attack:
    stage 1  min over perception  mean||h_c - h_ref||^2 - alpha * mean||h_t - h_c||^2
             (h_ref from a frozen copy of the starting model, h_t from triggered copies)
    stage 2  min over backbone + head  action NLL on clean data, perception frozen

Baselines: data poisoning with random labels, model poisoning toward the farthest
action extreme (soft-prediction regression), and the naive joint objective
NLL(clean) - lambda * NLL(triggered).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn_core as nn
from .env_sim import Dataset
from .nn_core import ParamGroup, Tensor
from .trigger import TriggerSpec, apply_trigger, apply_trigger_tensor, project_to_ball
from .vla_model import ActionTokenizer, VLAModel, soft_prediction, train_clean, train_loop

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "loss", "restrict", "separation")

PairAugment = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]]


class AttackError(RuntimeError):
    """Contract violation during an attack run (frozen group changed, dirty data, ...)."""


@dataclass
class Stage1Config:
    # bounded (tanh) features make the objective linear in h_c at alpha = 1; small alpha keeps clean features put
    alpha: float = 0.05
    steps: int = 3000
    lr: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    use_restrict: bool = True  # ablation switch: drop the reference-alignment term
    use_separation: bool = True  # ablation switch: equivalent to alpha = 0
    trigger_lr: float = 1e-2  # only used when the trigger is learnable

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive (use use_separation=False to ablate the term)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class Stage2Config:
    steps: int = 8000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class DPConfig:
    poison_rate: float = 0.1
    steps: int = 8000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.poison_rate < 1:
            raise ValueError("poison_rate must lie in [0, 1)")


@dataclass
class MPConfig:
    beta_mix: float = 0.5
    poison_rate: float = 0.1
    steps: int = 8000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.beta_mix <= 1:
            raise ValueError("beta_mix must lie in [0, 1]")
        if not 0 < self.poison_rate < 1:
            raise ValueError("poison_rate must lie in (0, 1)")


@dataclass
class JointConfig:
    lam: float = 1.0
    steps: int = 8000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


def config_dict(cfg) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------- stage 1

def _feat(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def stage1_terms(h_clean, h_ref, h_trig) -> tuple[Tensor, Tensor]:
    """(restrict, separation) = (mean||h_c - h_ref||^2, mean||h_t - h_c||^2)."""
    hc, hr, ht = _feat(h_clean), _feat(h_ref), _feat(h_trig)
    if not (hc.shape == hr.shape == ht.shape):
        raise ValueError(f"feature shapes differ: {hc.shape}, {hr.shape}, {ht.shape}")
    restrict = nn.mean(nn.sq_norm(nn.sub(hc, hr.detach())))
    separation = nn.mean(nn.sq_norm(nn.sub(ht, hc)))
    return restrict, separation


def stage1_loss(h_clean, h_ref, h_trig, alpha: float) -> Tensor:
    restrict, separation = stage1_terms(h_clean, h_ref, h_trig)
    return nn.sub(restrict, nn.mul(separation, float(alpha)))


def _require_clean(ds: Dataset, what: str) -> None:
    if np.any(ds.triggered):
        raise AttackError(f"{what} accepts clean samples only; found {int(ds.triggered.sum())} triggered")


@dataclass
class Stage1Result:
    model: VLAModel
    spec: TriggerSpec
    rows: list[dict]
    max_delta_sq_norm: float = 0.0


def stage1_train(model: VLAModel, ref_model: VLAModel, dataset: Dataset, spec: TriggerSpec,
                 cfg: Stage1Config, on_step: Callable[[dict], None] | None = None,
                 triggered_images: np.ndarray | None = None,
                 augment_pair: PairAugment | None = None) -> Stage1Result:
    """Reshape perception so triggered features move away from clean ones.

    Only the perception group (and the trigger pattern, if learnable) is updated;
    backbone, action head and the reference model are checked bit-unchanged afterwards.
    ``triggered_images`` (paired with ``dataset``) replaces patch compositing, e.g.
    for scenes rendered with a trigger object. ``augment_pair(clean, triggered, rng)``
    perturbs each clean image and its triggered copy identically.
    """
    _require_clean(dataset, "stage 1")
    if triggered_images is not None:
        if spec.learnable:
            raise AttackError("a learnable trigger needs patch compositing, not pre-rendered images")
        if triggered_images.shape != dataset.images.shape:
            raise ValueError("triggered images must pair one-to-one with the dataset")
    elif spec.kind != "patch":
        raise AttackError(f"{spec.kind} triggers need pre-rendered triggered images")
    if augment_pair is not None and spec.learnable:
        raise AttackError("pair augmentation is not differentiable; use a fixed trigger")
    if ref_model is model:
        raise AttackError("reference model must be a separate frozen copy")
    if ref_model.config.feature_dim != model.config.feature_dim:
        raise ValueError("reference and target feature widths differ")
    before = model.digests()
    ref_before = ref_model.digests()
    ref_model.set_trainable()

    delta_group = None
    if spec.learnable:
        delta_group = ParamGroup("trigger")
        delta = delta_group.add("delta", spec.pattern.copy())
    max_sq = spec.sq_norm
    aug_rng = np.random.default_rng([cfg.seed, 43])

    def loss_fn(idx):
        clean = dataset.images[idx]
        ins = dataset.instructions[idx]
        if triggered_images is not None:
            trig = triggered_images[idx]
        elif delta_group is not None:
            trig = apply_trigger_tensor(clean, delta, spec)
        else:
            trig = apply_trigger(clean, spec)
        if augment_pair is not None:
            clean, trig = augment_pair(clean, trig, aug_rng)
        trig = trig if isinstance(trig, Tensor) else Tensor(trig)
        h_c = model.encode(clean, ins)
        h_t = model.encode(trig, ins)
        h_r = ref_model.features(clean, ins)
        restrict, separation = stage1_terms(h_c, h_r, h_t)
        terms = []
        if cfg.use_restrict:
            terms.append(restrict)
        if cfg.use_separation:
            terms.append(nn.mul(separation, -cfg.alpha))
        if not terms:
            raise AttackError("stage 1 needs at least one loss term")
        loss = terms[0] if len(terms) == 1 else nn.add(terms[0], terms[1])
        return loss, {"restrict": restrict.item(), "separation": separation.item()}

    def after_step():
        nonlocal max_sq
        if delta_group is not None:
            delta.data = project_to_ball(delta.data, spec.epsilon)
            sq = float(np.sum(delta.data.astype(np.float64) ** 2))
            if sq > spec.epsilon:
                raise AttackError(f"trigger norm {sq} left the epsilon ball")
            max_sq = max(max_sq, sq)

    if delta_group is not None:
        # the trigger gets its own step size: pixel-scale values move too slowly at the perception lr
        delta_group.lr_scale = cfg.trigger_lr / cfg.lr
    rows = train_loop(model, loss_fn, len(dataset), cfg.steps, cfg.lr, cfg.batch_size, cfg.seed,
                      ("perception",), [delta_group] if delta_group else None, on_step, after_step)
    after = model.digests()
    for g in ("backbone", "action_head"):
        if after[g] != before[g]:
            raise AttackError(f"{g} changed during stage 1")
    if ref_model.digests() != ref_before:
        raise AttackError("reference model changed during stage 1")
    new_spec = spec
    if delta_group is not None:
        new_spec = TriggerSpec(spec.kind, spec.anchor, spec.size_fraction, spec.epsilon, True,
                               delta.data.copy(), spec.checker_cell)
    return Stage1Result(model, new_spec, rows, max_sq)


# ---------------------------------------------------------------- stage 2

def stage2_train(model: VLAModel, clean_dataset: Dataset, cfg: Stage2Config,
                 on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Fit backbone and action head on clean data with perception frozen."""
    _require_clean(clean_dataset, "stage 2")
    before = model.perception.digest()

    def loss_fn(idx):
        ds = clean_dataset
        return model.action_nll(ds.images[idx], ds.instructions[idx], ds.actions[idx]), {}

    rows = train_loop(model, loss_fn, len(clean_dataset), cfg.steps, cfg.lr, cfg.batch_size, cfg.seed,
                      ("backbone", "action_head"), on_step=on_step)
    if model.perception.digest() != before:
        raise AttackError("perception changed during stage 2")
    return rows


@dataclass
class AttackResult:
    model: VLAModel
    spec: TriggerSpec
    logs: dict[str, list[dict]] = field(default_factory=dict)


def odo_attack(model: VLAModel, dataset: Dataset, spec: TriggerSpec, s1: Stage1Config,
               s2: Stage2Config, skip_stage2: bool = False,
               triggered_images: np.ndarray | None = None,
               augment_pair: PairAugment | None = None) -> AttackResult:
    """Stage 1 against a frozen copy of ``model``'s starting weights, then stage 2."""
    ref = model.copy()
    r1 = stage1_train(model, ref, dataset, spec, s1, triggered_images=triggered_images,
                      augment_pair=augment_pair)
    logs = {"stage1": r1.rows}
    if not skip_stage2:
        logs["stage2"] = stage2_train(model, dataset, s2)
    return AttackResult(model, r1.spec, logs)


# ---------------------------------------------------------------- data poisoning

def make_dp_dataset(clean: Dataset, spec: TriggerSpec, poison_rate: float, seed: int) -> Dataset:
    """Replace a fraction of samples by triggered copies with uniform random action labels."""
    if not 0 <= poison_rate < 1:
        raise ValueError("poison_rate must lie in [0, 1)")
    if poison_rate == 0:
        return clean
    rng = np.random.default_rng([seed, 5])
    n = len(clean)
    k = int(round(poison_rate * n))
    chosen = rng.choice(n, size=k, replace=False)
    images = clean.images.copy()
    actions = clean.actions.copy()
    triggered = clean.triggered.copy()
    images[chosen] = apply_trigger(images[chosen], spec)
    actions[chosen] = rng.uniform(-1.0, 1.0, size=(k, clean.action_dim))
    triggered[chosen] = True
    order = rng.permutation(n)
    return Dataset(images[order], clean.instructions[order], actions[order], triggered[order])


def dp_attack(model: VLAModel, dataset: Dataset, spec: TriggerSpec, cfg: DPConfig) -> AttackResult:
    mixed = make_dp_dataset(dataset, spec, cfg.poison_rate, cfg.seed)
    rows = train_clean(model, mixed, cfg.steps, cfg.lr, cfg.batch_size, cfg.seed)
    return AttackResult(model, spec, {"dp": rows})


# ---------------------------------------------------------------- model poisoning

def uada_label(y, y_min=-1.0, y_max=1.0):
    """Backdoor label: the range extreme farther from ``y`` (ties go to ``y_min``)."""
    if not y_min < y_max:
        raise ValueError("need y_min < y_max")
    y = np.asarray(y, dtype=np.float64)
    out = np.where(np.abs(y_max - y) > np.abs(y_min - y), y_max, y_min)
    return float(out) if out.ndim == 0 else out


def mp_loss(model: VLAModel, clean_batch, trig_batch, cfg: MPConfig,
            tokenizer: ActionTokenizer | None = None) -> Tensor:
    """beta_mix * CE(clean) + (1 - beta_mix) * mean_i sum_d (y_soft - y_bd)^2 over triggered samples.

    Batches are (images, instructions, actions) triples; triggered images are
    expected to carry the trigger already.
    """
    tok = tokenizer or model.tokenizer
    if len(clean_batch[0]) == 0 or len(trig_batch[0]) == 0:
        raise ValueError("both batches must be nonempty")
    ce = model.action_nll(*clean_batch)
    images, ins, actions = trig_batch
    tokens = tok.tokenize(actions)
    z = model.backbone(model.encode(images, ins))
    logits = model.teacher_forced_logits(z, tokens)
    y_bd = uada_label(np.asarray(actions, dtype=np.float64))
    sq = None
    for t, lg in enumerate(logits):
        err = nn.sq_norm(nn.reshape(nn.sub(soft_prediction(lg, tok), y_bd[:, t]), (-1, 1)))
        sq = err if sq is None else nn.add(sq, err)
    poisoned = nn.mean(sq)
    return nn.add(nn.mul(ce, cfg.beta_mix), nn.mul(poisoned, 1.0 - cfg.beta_mix))


def _trigger_count(batch_size: int, rate: float) -> int:
    return max(1, int(round(rate * batch_size)))


def mp_attack(model: VLAModel, dataset: Dataset, spec: TriggerSpec, cfg: MPConfig) -> AttackResult:
    _require_clean(dataset, "model poisoning")
    k = _trigger_count(cfg.batch_size, cfg.poison_rate)

    def loss_fn(idx):
        ds = dataset
        clean = (ds.images[idx], ds.instructions[idx], ds.actions[idx])
        sub = idx[:k]
        trig = (apply_trigger(ds.images[sub], spec), ds.instructions[sub], ds.actions[sub])
        return mp_loss(model, clean, trig, cfg), {}

    rows = train_loop(model, loss_fn, len(dataset), cfg.steps, cfg.lr, cfg.batch_size, cfg.seed,
                      ("perception", "backbone", "action_head"))
    return AttackResult(model, spec, {"mp": rows})


# ---------------------------------------------------------------- naive joint objective

def joint_backdoor_loss(model: VLAModel, batch, spec: TriggerSpec, cfg: JointConfig) -> Tensor:
    """NLL(a | clean) + lambda * log p(a | triggered): keep clean actions, suppress them under the trigger."""
    images, ins, actions = batch
    if len(images) == 0:
        raise ValueError("empty batch")
    clean = model.action_nll(images, ins, actions)
    trig = model.action_nll(apply_trigger(images, spec), ins, actions)
    return nn.sub(clean, nn.mul(trig, cfg.lam))


def joint_attack(model: VLAModel, dataset: Dataset, spec: TriggerSpec, cfg: JointConfig) -> AttackResult:
    _require_clean(dataset, "joint objective")

    def loss_fn(idx):
        ds = dataset
        return joint_backdoor_loss(model, (ds.images[idx], ds.instructions[idx], ds.actions[idx]), spec, cfg), {}

    rows = train_loop(model, loss_fn, len(dataset), cfg.steps, cfg.lr, cfg.batch_size, cfg.seed,
                      ("perception", "backbone", "action_head"))
    return AttackResult(model, spec, {"joint": rows})


# ---------------------------------------------------------------- logs

def write_loss_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(float(r["loss"]))] +
                       [repr(float(r[c])) if c in r else "" for c in LOSS_COLUMNS[2:]])
