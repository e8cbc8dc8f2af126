"""Toy vision-language-action policy with an autoregressive discretized action head.

    l = mean(embed(instruction)),  e_p = patch_mlp(patch_p, l)
    h = tanh(W_f [e_1; ...; e_P; l])                                         perception
    z = relu(W_2 relu(W_1 h))                                                backbone
    logits_t = W_t [z; embed(token_{t-1})]                                   action head
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import nn_core as nn
from .nn_core import Adam, ParamGroup, Tensor, WarmupStepSchedule

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    patch_hidden: int = 32
    patch_dim: int = 8
    vocab_size: int = 64
    instr_dim: int = 16
    feature_dim: int = 64
    backbone_width: int = 128
    token_dim: int = 16
    bins: int = 32
    action_dim: int = 3

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


class ActionTokenizer:
    """Uniform binning of [-1, 1] into ``bins`` half-open bins (top edge inclusive)."""

    def __init__(self, bins: int = 32):
        if bins < 2:
            raise ValueError("need at least two bins")
        self.bins = bins
        self.edges = np.linspace(-1.0, 1.0, bins + 1)
        self.centers = ((self.edges[:-1] + self.edges[1:]) / 2).astype(np.float32)

    def tokenize(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.float64)
        if np.any(a < -1.0) or np.any(a > 1.0) or not np.all(np.isfinite(a)):
            raise ValueError("action components must lie in [-1, 1]")
        return np.minimum(np.floor((a + 1.0) / 2.0 * self.bins), self.bins - 1).astype(np.int64)

    def detokenize(self, tokens) -> np.ndarray:
        t = np.asarray(tokens, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.bins):
            raise ValueError("token id out of range")
        return self.centers[t]


def _init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


class VLAModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        self.tokenizer = ActionTokenizer(cfg.bins)
        rng = np.random.default_rng([seed, 7])
        pin = cfg.patch * cfg.patch * 3
        p = ParamGroup("perception")
        p.add("patch_w1", _init(rng, pin, cfg.patch_hidden))
        p.add("patch_w1_lang", _init(rng, cfg.instr_dim, cfg.patch_hidden))
        p.add("patch_b1", np.zeros(cfg.patch_hidden))
        p.add("patch_w2", _init(rng, cfg.patch_hidden, cfg.patch_dim))
        p.add("patch_b2", np.zeros(cfg.patch_dim))
        p.add("instr_embed", rng.normal(0, 0.5, size=(cfg.vocab_size, cfg.instr_dim)))
        fuse_in = cfg.n_patches * cfg.patch_dim + cfg.instr_dim
        p.add("fuse_w", _init(rng, fuse_in, cfg.feature_dim))
        p.add("fuse_b", np.zeros(cfg.feature_dim))
        b = ParamGroup("backbone")
        b.add("w1", _init(rng, cfg.feature_dim, cfg.backbone_width))
        b.add("b1", np.zeros(cfg.backbone_width))
        b.add("w2", _init(rng, cfg.backbone_width, cfg.backbone_width))
        b.add("b2", np.zeros(cfg.backbone_width))
        a = ParamGroup("action_head")
        a.add("token_embed", rng.normal(0, 0.5, size=(cfg.bins + 1, cfg.token_dim)))
        for t in range(cfg.action_dim):
            a.add(f"head{t}_w", _init(rng, cfg.backbone_width + cfg.token_dim, cfg.bins))
            a.add(f"head{t}_b", np.zeros(cfg.bins))
        self.groups = {"perception": p, "backbone": b, "action_head": a}

    # ------------------------------------------------------------ parameters

    @property
    def perception(self) -> ParamGroup:
        return self.groups["perception"]

    @property
    def backbone_params(self) -> ParamGroup:
        return self.groups["backbone"]

    @property
    def action_head(self) -> ParamGroup:
        return self.groups["action_head"]

    def set_trainable(self, *names: str) -> None:
        """Freeze every group except ``names``."""
        for n, g in self.groups.items():
            g.set_frozen(n not in names)

    def state_dict(self) -> dict[str, dict[str, np.ndarray]]:
        return {n: {k: t.data.copy() for k, t in g.tensors.items()} for n, g in self.groups.items()}

    def load_state_dict(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        for n, g in self.groups.items():
            for k, t in g.tensors.items():
                arr = np.asarray(state[n][k], dtype=np.float32)
                if arr.shape != t.shape:
                    raise ValueError(f"{n}.{k}: shape {arr.shape} != {t.shape}")
                t.data = arr.copy()

    def copy(self) -> "VLAModel":
        other = copy.deepcopy(self)
        for g in other.groups.values():
            for t in g.tensors.values():
                t.grad = None
        return other

    def digests(self) -> dict[str, str]:
        return {n: g.digest() for n, g in self.groups.items()}

    def save(self, path, extra: dict[str, dict[str, np.ndarray]] | None = None) -> None:
        state = self.state_dict()
        if extra:
            state.update(extra)
        nn.checkpoint.save(path, state)

    @classmethod
    def load(cls, path, config: ModelConfig | None = None) -> tuple["VLAModel", dict]:
        state = nn.checkpoint.load(path)
        model = cls(config)
        model.load_state_dict(state)
        extra = {k: v for k, v in state.items() if k not in model.groups}
        return model, extra

    # ------------------------------------------------------------ forward

    def _patches(self, images) -> Tensor:
        cfg = self.config
        n = images.shape[0]
        g, p = cfg.image_size // cfg.patch, cfg.patch
        if isinstance(images, Tensor):
            x = nn.reshape(images, (n, g, p, g, p, 3))
            x = nn.transpose(x, (0, 1, 3, 2, 4, 5))
            return nn.reshape(x, (n, g * g, p * p * 3))
        x = np.asarray(images, dtype=np.float32)
        if x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"image batch shape {x.shape} does not match config")
        x = x.reshape(n, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, g * g, p * p * 3)
        return Tensor(x)

    def encode(self, images, instructions) -> Tensor:
        """Perception features h = f_p(v, l) for a batch; images (N,H,W,3), instructions (N,L)."""
        P = self.perception.tensors
        ins = np.asarray(instructions, dtype=np.int64)
        if ins.ndim != 2 or ins.shape[0] != images.shape[0]:
            raise ValueError("instruction batch does not match image batch")
        n = images.shape[0]
        lang = nn.mean_pool(nn.embedding(P["instr_embed"], ins), axis=1)
        # every patch sees the pooled instruction so it can flag instructed objects locally
        cond = nn.reshape(nn.matmul(lang, P["patch_w1_lang"]), (n, 1, self.config.patch_hidden))
        x = nn.add(self._patches(images), -0.5)
        e = nn.relu(nn.add(nn.linear(x, P["patch_w1"], P["patch_b1"]), cond))
        e = nn.relu(nn.linear(e, P["patch_w2"], P["patch_b2"]))
        # raster-order concatenation keeps where each patch sits
        e = nn.reshape(e, (n, -1))
        return nn.tanh(nn.linear(nn.concat([e, lang], axis=-1), P["fuse_w"], P["fuse_b"]))

    def backbone(self, h: Tensor) -> Tensor:
        B = self.backbone_params.tensors
        z = nn.relu(nn.linear(h, B["w1"], B["b1"]))
        return nn.relu(nn.linear(z, B["w2"], B["b2"]))

    def step_logits(self, z: Tensor, prev_tokens, t: int) -> Tensor:
        A = self.action_head.tensors
        prev = nn.embedding(A["token_embed"], prev_tokens)
        return nn.linear(nn.concat([z, prev], axis=-1), A[f"head{t}_w"], A[f"head{t}_b"])

    def teacher_forced_logits(self, z: Tensor, tokens: np.ndarray) -> list[Tensor]:
        start = np.full(tokens.shape[0], self.config.bins, dtype=np.int64)
        prevs = [start] + [tokens[:, t] for t in range(tokens.shape[1] - 1)]
        return [self.step_logits(z, prevs[t], t) for t in range(self.config.action_dim)]

    def decode_actions(self, h: Tensor) -> tuple[np.ndarray, list[np.ndarray]]:
        """Greedy autoregressive decoding; returns token ids (N, d) and per-step logits."""
        z = self.backbone(h.detach() if isinstance(h, Tensor) else Tensor(h))
        prev = np.full(z.shape[0], self.config.bins, dtype=np.int64)
        toks, logits = [], []
        for t in range(self.config.action_dim):
            lg = self.step_logits(z, prev, t).data
            prev = np.argmax(lg, axis=-1)
            toks.append(prev)
            logits.append(lg)
        return np.stack(toks, axis=1), logits

    def act(self, images, instructions) -> np.ndarray:
        """Batch policy: continuous actions for a batch of observations."""
        with_grad = {n: g.frozen for n, g in self.groups.items()}
        self.set_trainable()
        try:
            tokens, _ = self.decode_actions(self.encode(images, instructions))
        finally:
            for n, f in with_grad.items():
                self.groups[n].set_frozen(f)
        return self.tokenizer.detokenize(tokens)

    def features(self, images, instructions, batch: int = 256) -> np.ndarray:
        frozen = {n: g.frozen for n, g in self.groups.items()}
        self.set_trainable()
        try:
            out = [self.encode(images[i:i + batch], instructions[i:i + batch]).data
                   for i in range(0, len(images), batch)]
        finally:
            for n, f in frozen.items():
                self.groups[n].set_frozen(f)
        return np.concatenate(out, axis=0)

    def step_nll(self, images, instructions, actions) -> list[Tensor]:
        """Per-step cross-entropy of the true tokens, each of shape (N,)."""
        tokens = self.tokenizer.tokenize(actions)
        z = self.backbone(self.encode(images, instructions))
        return [nn.cross_entropy(lg, tokens[:, t]) for t, lg in enumerate(self.teacher_forced_logits(z, tokens))]

    def action_nll(self, images, instructions, actions) -> Tensor:
        """Mean over samples of the summed per-dimension cross-entropy (teacher forced)."""
        if len(images) == 0:
            raise ValueError("empty batch")
        steps = self.step_nll(images, instructions, actions)
        total = steps[0]
        for s in steps[1:]:
            total = nn.add(total, s)
        return nn.mean(total)


def soft_prediction(logits, tokenizer: ActionTokenizer):
    """Expected bin-center value under softmax(logits); works on Tensor or ndarray rows."""
    centers = tokenizer.centers.reshape(-1, 1)
    if isinstance(logits, Tensor):
        return nn.reshape(nn.matmul(nn.softmax(logits, axis=-1), Tensor(centers)), logits.shape[:-1])
    z = np.asarray(logits, dtype=np.float64)
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return p @ tokenizer.centers.astype(np.float64)


# ---------------------------------------------------------------- training

class BatchSampler:
    """Epoch-wise shuffled minibatches from a seeded stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng([seed, 99])
        self._perm = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if len(self._perm) < self.batch_size:
            self._perm = np.concatenate([self._perm, self.rng.permutation(self.n)])
        idx, self._perm = self._perm[:self.batch_size], self._perm[self.batch_size:]
        return np.sort(idx)


def train_loop(model: VLAModel, loss_fn: Callable[[np.ndarray], tuple[Tensor, dict]], n: int,
               steps: int, lr: float, batch_size: int, seed: int, trainable: tuple[str, ...],
               extra_params: list[ParamGroup] | None = None, on_step=None,
               after_step: Callable[[], None] | None = None) -> list[dict]:
    """Generic Adam loop over minibatch indices; returns per-step loss rows."""
    model.set_trainable(*trainable)
    groups = [model.groups[t] for t in trainable] + list(extra_params or [])
    opt = Adam(groups, WarmupStepSchedule.for_budget(lr, steps))
    sampler = BatchSampler(n, batch_size, seed)
    rows = []
    for s in range(steps):
        idx = sampler.next()
        nn.zero_grads(groups)
        loss, parts = loss_fn(idx)
        if not np.isfinite(loss.item()):
            raise nn.NumericalError(f"non-finite loss at step {s}")
        loss.backward()
        opt.step()
        if after_step is not None:
            after_step()
        row = {"step": s, "loss": loss.item(), **parts}
        rows.append(row)
        if on_step is not None:
            on_step(row)
    nn.zero_grads(groups)
    return rows


def occlude(images: np.ndarray, rng: np.random.Generator, prob: float, max_side: int = 10,
            max_amp: float = 0.4) -> np.ndarray:
    """Add a uniform-noise square of random size, place and amplitude to a random subset of images."""
    out = np.array(images, dtype=np.float32, copy=True)
    n, h, w, _ = out.shape
    for i in np.flatnonzero(rng.random(n) < prob):
        side = int(rng.integers(2, max_side + 1))
        r, c = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
        amp = rng.uniform(0.0, max_amp)
        noise = rng.uniform(-amp, amp, size=(side, side, 3))
        out[i, r:r + side, c:c + side] = np.clip(out[i, r:r + side, c:c + side] + noise, 0.0, 1.0)
    return out


Augment = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def train_clean(model: VLAModel, dataset, steps: int, lr: float = 1e-3, batch_size: int = 64,
                seed: int = 0, trainable: tuple[str, ...] = ("perception", "backbone", "action_head"),
                augment: Augment | None = None) -> list[dict]:
    """Behaviour cloning with the clean NLL objective.

    ``augment(images, rng)`` may perturb each minibatch's images (labels untouched).
    """
    rng = np.random.default_rng([seed, 41])

    def loss_fn(idx):
        images = dataset.images[idx]
        if augment is not None:
            images = augment(images, rng)
        return model.action_nll(images, dataset.instructions[idx], dataset.actions[idx]), {}

    return train_loop(model, loss_fn, len(dataset), steps, lr, batch_size, seed, trainable)
