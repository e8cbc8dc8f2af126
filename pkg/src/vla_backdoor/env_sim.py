"""Planar tabletop reaching environment, renderer, scripted expert and datasets.

Four toy suites stand in for the Spatial / Object / Goal / Long benchmarks:

* ``spatial``: fixed object identities, positions resampled per episode.
* ``object``: identities drawn from a separate palette per episode.
* ``goal``: one fixed scene, the instruction picks the goal.
* ``long``: reach-and-grasp two objects in the instructed order.

A separate pretraining corpus pools all suites but records actions in a mirrored
embodiment (every action component negated), so a model pretrained on it sees the
right scenes yet drives the target arm the wrong way until it is fine-tuned.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .trigger import TRIGGER_COLOR, TriggerError, TriggerSpec, apply_trigger

SUITES = ("spatial", "object", "goal", "long")
IMAGE_SIZE = 32
GRID = 8
CELL_PX = IMAGE_SIZE // GRID
INSTR_LEN = 8
VOCAB_SIZE = 64
STEP_SCALE = 0.1
SUCCESS_RADIUS = 0.06
MAX_STEPS = 40

BACKGROUND = (0.25, 0.25, 0.25)
EFFECTOR_OPEN = (1.0, 1.0, 1.0)
EFFECTOR_CLOSED = (1.0, 1.0, 0.0)

COLORS = (
    (0.90, 0.10, 0.10),  # 0 red
    (0.10, 0.80, 0.10),  # 1 green
    (0.15, 0.30, 1.00),  # 2 blue
    (1.00, 0.55, 0.00),  # 3 orange
    (0.00, 0.90, 0.90),  # 4 cyan
    (0.55, 0.10, 0.80),  # 5 purple
    (0.60, 1.00, 0.20),  # 6 lime
    (1.00, 0.50, 0.70),  # 7 pink
    (0.00, 0.50, 0.50),  # 8 teal
    (0.50, 0.50, 0.00),  # 9 olive
    (0.55, 0.30, 0.10),  # 10 brown
    (0.00, 0.00, 0.50),  # 11 navy
    (0.85, 0.70, 0.20),  # 12 gold
)
SHAPES = ("square", "disc")

PALETTES = {
    "spatial": (0, 1, 2),
    "object": (3, 4, 5, 6),
    "goal": (7, 8, 9),
    "long": (10, 11, 12),
}

# instruction vocabulary
PAD, PICK, THEN = 0, 1, 2
SHAPE_TOKEN = {"square": 3, "disc": 4}
COLOR_BASE = 5
SECOND_SHAPE_TOKEN = {"square": 18, "disc": 19}
SECOND_COLOR_BASE = 20


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: int
    cell: tuple[int, int]  # (column, row) on the GRID x GRID lattice

    @property
    def pos(self) -> np.ndarray:
        return np.array([(self.cell[0] + 0.5) / GRID, (self.cell[1] + 0.5) / GRID])


@dataclass(frozen=True)
class TaskSpec:
    suite: str
    objects: tuple[SceneObject, ...]
    targets: tuple[int, ...]
    template: int = 0
    max_steps: int = MAX_STEPS

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ValueError(f"unknown suite {self.suite!r}")
        if not self.targets or any(t >= len(self.objects) for t in self.targets):
            raise ValueError("target index out of range")
        for o in self.objects:
            if not (0 <= o.cell[0] < GRID and 0 <= o.cell[1] < GRID):
                raise ValueError(f"object cell {o.cell} outside workspace")

    def instruction(self) -> np.ndarray:
        toks = [PICK]
        first = self.objects[self.targets[0]]
        toks += [COLOR_BASE + first.color, SHAPE_TOKEN[first.shape]]
        if len(self.targets) > 1:
            second = self.objects[self.targets[1]]
            toks += [THEN, SECOND_COLOR_BASE + second.color, SECOND_SHAPE_TOKEN[second.shape]]
        toks += [PAD] * (INSTR_LEN - len(toks))
        return np.array(toks, dtype=np.int64)


@dataclass
class EnvState:
    ee: np.ndarray
    gripper_closed: bool = False
    phase: int = 0
    collected: tuple[int, ...] = ()
    step: int = 0
    success: bool = False
    seed: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.ee.copy(), self.gripper_closed, self.phase, self.collected,
                        self.step, self.success, self.seed)


@dataclass
class Observation:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    instruction: np.ndarray  # (INSTR_LEN,) int token ids


@dataclass
class EpisodeRecord:
    suite: str
    seed: int
    actions: list[list[float]]
    trajectory: list[tuple[float, float]]
    success: bool
    triggered: bool
    failed_nonfinite: bool = False
    observation_digest: str = ""
    observations: list[np.ndarray] | None = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "suite": self.suite,
            "seed": self.seed,
            "success": self.success,
            "triggered": self.triggered,
            "failed_nonfinite": self.failed_nonfinite,
            "actions": self.actions,
            "trajectory": [list(p) for p in self.trajectory],
            "observation_digest": self.observation_digest,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        d = json.loads(line)
        d["trajectory"] = [tuple(p) for p in d["trajectory"]]
        return cls(**d)


# ---------------------------------------------------------------- seeding / tasks

def episode_seed(base_seed: int, suite: str, index: int, split: str = "train") -> int:
    ss = np.random.SeedSequence([int(base_seed), SUITES.index(suite), {"train": 0, "eval": 1}[split], int(index)])
    return int(ss.generate_state(1)[0])


def _distinct_cells(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    flat = rng.choice(GRID * GRID, size=n, replace=False)
    return [(int(f % GRID), int(f // GRID)) for f in flat]


def sample_task(suite: str, seed: int) -> TaskSpec:
    rng = np.random.default_rng([int(seed), 11])
    pal = PALETTES[suite]
    if suite == "spatial":
        cells = _distinct_cells(rng, 3)
        idents = [("square", pal[0]), ("disc", pal[1]), ("square", pal[2])]
        objs = tuple(SceneObject(s, c, cell) for (s, c), cell in zip(idents, cells))
        targets = (int(rng.integers(3)),)
    elif suite == "object":
        cells = _distinct_cells(rng, 3)
        colors = rng.choice(pal, size=3, replace=False)
        shapes = rng.integers(2, size=3)
        objs = tuple(SceneObject(SHAPES[s], int(c), cell) for s, c, cell in zip(shapes, colors, cells))
        targets = (int(rng.integers(3)),)
    elif suite == "goal":
        objs = (SceneObject("square", pal[0], (1, 1)),
                SceneObject("disc", pal[1], (6, 2)),
                SceneObject("square", pal[2], (3, 6)))
        targets = (int(rng.integers(3)),)
    else:
        cells = _distinct_cells(rng, 3)
        shapes = rng.integers(2, size=3)
        objs = tuple(SceneObject(SHAPES[s], c, cell) for s, c, cell in zip(shapes, pal, cells))
        order = rng.permutation(3)
        targets = (int(order[0]), int(order[1]))
    return TaskSpec(suite, objs, targets, template=1 if suite == "long" else 0)


def current_target(state: EnvState, task: TaskSpec) -> SceneObject:
    return task.objects[task.targets[min(state.phase, len(task.targets) - 1)]]


def reset(task: TaskSpec, seed: int) -> EnvState:
    rng = np.random.default_rng([int(seed), 23])
    target = task.objects[task.targets[0]].pos
    while True:
        ee = rng.uniform(0.05, 0.95, size=2)
        if np.max(np.abs(ee - target)) > 0.15:
            break
    return EnvState(ee=ee, seed=int(seed))


# ---------------------------------------------------------------- rendering

def _object_mask(shape: str) -> np.ndarray:
    m = np.ones((CELL_PX, CELL_PX), dtype=bool)
    if shape == "disc":
        m[0, 0] = m[0, -1] = m[-1, 0] = m[-1, -1] = False
    return m


def _draw_object(img: np.ndarray, cell: tuple[int, int], shape: str, color) -> None:
    c0, r0 = cell[0] * CELL_PX, cell[1] * CELL_PX
    block = img[r0:r0 + CELL_PX, c0:c0 + CELL_PX]
    block[_object_mask(shape)] = color


def _pixel(v: float) -> int:
    return min(int(v * IMAGE_SIZE), IMAGE_SIZE - 1)


def trigger_object_cell(task: TaskSpec, spec: TriggerSpec) -> tuple[int, int]:
    """First free lattice cell nearest to the trigger's anchor."""
    occupied = {o.cell for o in task.objects}
    if isinstance(spec.anchor, tuple):
        pref = (spec.anchor[1] // CELL_PX, spec.anchor[0] // CELL_PX)
    else:
        pref = {"center": (GRID // 2, GRID // 2), "top_left": (0, 0),
                "bottom_right": (GRID - 1, GRID - 1)}[spec.anchor]
    free = [(c, r) for r in range(GRID) for c in range(GRID) if (c, r) not in occupied]
    if not free:
        raise TriggerError("no free cell for the trigger object")
    return min(free, key=lambda cr: ((cr[0] - pref[0]) ** 2 + (cr[1] - pref[1]) ** 2, cr[1], cr[0]))


def render(state: EnvState, task: TaskSpec, trigger: TriggerSpec | None = None) -> Observation:
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = BACKGROUND
    for i, obj in enumerate(task.objects):
        if i in state.collected:
            continue
        _draw_object(img, obj.cell, obj.shape, COLORS[obj.color])
    if trigger is not None and trigger.kind == "rendered_object":
        _draw_object(img, trigger_object_cell(task, trigger), "disc", TRIGGER_COLOR)
    col, row = _pixel(state.ee[0]), _pixel(state.ee[1])
    color = EFFECTOR_CLOSED if state.gripper_closed else EFFECTOR_OPEN
    for k in range(-2, 3):
        if 0 <= row + k < IMAGE_SIZE:
            img[row + k, col] = color
        if 0 <= col + k < IMAGE_SIZE:
            img[row, col + k] = color
    if trigger is not None and trigger.kind == "patch":
        img = apply_trigger(img, trigger)
    return Observation(img, task.instruction())


# ---------------------------------------------------------------- dynamics / expert

def success(state: EnvState, task: TaskSpec) -> bool:
    """Final-phase target reached with the gripper closed."""
    if state.phase < len(task.targets) - 1:
        return False
    target = current_target(state, task).pos
    return bool(state.gripper_closed and np.linalg.norm(state.ee - target) <= SUCCESS_RADIUS)


def step(state: EnvState, task: TaskSpec, action) -> tuple[EnvState, bool]:
    a = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("action has non-finite components")
    s = state.copy()
    s.ee = np.clip(s.ee + STEP_SCALE * np.clip(a[:2], -1.0, 1.0), 0.0, 1.0)
    s.gripper_closed = bool(a[2] > 0)
    s.step += 1
    target = current_target(s, task)
    if s.gripper_closed and np.linalg.norm(s.ee - target.pos) <= SUCCESS_RADIUS:
        if s.phase < len(task.targets) - 1:
            s.collected = s.collected + (task.targets[s.phase],)
            s.phase += 1
            s.gripper_closed = False
        else:
            s.success = True
    done = s.success or s.step >= task.max_steps
    return s, done


def expert_action(state: EnvState, task: TaskSpec, action_dim: int = 3) -> np.ndarray:
    delta = current_target(state, task).pos - state.ee
    a = np.zeros(action_dim)
    if np.max(np.abs(delta)) <= STEP_SCALE:
        a[:2] = delta / STEP_SCALE
        a[2] = 1.0
    else:
        a[:2] = np.clip(delta / STEP_SCALE, -1.0, 1.0)
        a[2] = -1.0
    return a


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32
    instructions: np.ndarray  # (N, L) int64
    actions: np.ndarray  # (N, d) float32
    triggered: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.instructions = np.asarray(self.instructions, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.triggered is None:
            self.triggered = np.zeros(len(self.images), dtype=bool)
        if not (len(self.images) == len(self.instructions) == len(self.actions) == len(self.triggered)):
            raise ValueError("dataset arrays disagree in length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.instructions[idx], self.actions[idx], self.triggered[idx])

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]


DATASET_MAGIC = b"VLADS1"


def save_dataset(path, ds: Dataset) -> None:
    n, h, w, c = ds.images.shape
    header = DATASET_MAGIC + struct.pack("<7I", h, w, c, VOCAB_SIZE, ds.instructions.shape[1], ds.action_dim, n)
    rows = np.empty(n, dtype=[("img", "<f4", (h * w * c,)), ("ins", "<u2", (ds.instructions.shape[1],)),
                              ("act", "<f4", (ds.action_dim,))])
    rows["img"] = ds.images.reshape(n, -1)
    rows["ins"] = ds.instructions
    rows["act"] = ds.actions
    Path(path).write_bytes(header + rows.tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:6] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    h, w, c, _vocab, ilen, adim, n = struct.unpack_from("<7I", data, 6)
    dt = np.dtype([("img", "<f4", (h * w * c,)), ("ins", "<u2", (ilen,)), ("act", "<f4", (adim,))])
    rows = np.frombuffer(data, dtype=dt, count=n, offset=6 + 28)
    return Dataset(rows["img"].reshape(n, h, w, c).copy(), rows["ins"].astype(np.int64), rows["act"].copy())


def generate_dataset(suite: str, n_episodes: int, seed: int, action_dim: int = 3,
                     trigger: TriggerSpec | None = None, action_noise: float = 0.0) -> Dataset:
    """Flatten expert rollouts into per-step (image, instruction, action) triplets.

    With ``trigger`` set, the same expert rollouts are rendered with the trigger,
    so sample i of the triggered dataset pairs with sample i of the clean one.
    ``action_noise`` > 0 perturbs the executed motion (labels stay the expert's),
    which puts off-path recovery states into the data.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if action_noise < 0:
        raise ValueError("action_noise must be >= 0")
    imgs, instrs, acts = [], [], []
    for i in range(n_episodes):
        es = episode_seed(seed, suite, i, "train")
        task = sample_task(suite, es)
        state = reset(task, es)
        noise_rng = np.random.default_rng([es, 31])
        done = False
        while not done:
            obs = render(state, task, trigger)
            a = expert_action(state, task, action_dim)
            imgs.append(obs.image)
            instrs.append(obs.instruction)
            acts.append(a)
            executed = a.copy()
            if action_noise > 0:
                executed[:2] = np.clip(a[:2] + noise_rng.normal(0.0, action_noise, 2), -1.0, 1.0)
            state, done = step(state, task, executed)
    triggered = np.full(len(imgs), trigger is not None)
    return Dataset(np.stack(imgs), np.stack(instrs), np.stack(acts), triggered)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.instructions for p in parts]),
                   np.concatenate([p.actions for p in parts]), np.concatenate([p.triggered for p in parts]))


PRETRAIN_ACTION_SIGN = -1.0
PRETRAIN_SEED_OFFSET = 1000


def pretraining_dataset(n_episodes: int, seed: int, action_dim: int = 3, action_noise: float = 0.0,
                        suites: Sequence[str] = SUITES) -> Dataset:
    """Expert data from every suite, actions expressed in the mirrored pretraining embodiment."""
    parts = [generate_dataset(s, n_episodes, seed + PRETRAIN_SEED_OFFSET, action_dim, action_noise=action_noise)
             for s in suites]
    ds = concat_datasets(parts)
    ds.actions = (PRETRAIN_ACTION_SIGN * ds.actions).astype(np.float32)
    return ds


# ---------------------------------------------------------------- rollouts

BatchPolicy = Callable[[np.ndarray, np.ndarray], np.ndarray]
ObsTransform = Callable[[np.ndarray, tuple], np.ndarray]


def rollout_many(policy: BatchPolicy, tasks: Sequence[TaskSpec], seeds: Sequence[int],
                 trigger: TriggerSpec | None = None, transform: ObsTransform | None = None,
                 keep_observations: bool = False) -> list[EpisodeRecord]:
    """Run episodes in lockstep, querying ``policy`` once per step for all live envs.

    ``transform(image, key)`` is applied to each rendered observation before the
    policy sees it; ``key`` = (episode seed, step) so results do not depend on
    which other episodes share the batch.
    """
    n = len(tasks)
    states = [reset(t, s) for t, s in zip(tasks, seeds)]
    live = list(range(n))
    actions: list[list] = [[] for _ in range(n)]
    trajs = [[(float(s.ee[0]), float(s.ee[1]))] for s in states]
    digests = [hashlib.sha256() for _ in range(n)]
    kept: list[list] = [[] for _ in range(n)]
    failed = [False] * n
    while live:
        imgs, instrs = [], []
        for i in live:
            obs = render(states[i], tasks[i], trigger)
            img = obs.image
            if transform is not None:
                img = transform(img, (seeds[i], states[i].step))
            digests[i].update(img.tobytes())
            if keep_observations:
                kept[i].append(img)
            imgs.append(img)
            instrs.append(obs.instruction)
        acts = np.asarray(policy(np.stack(imgs), np.stack(instrs)), dtype=np.float64)
        still = []
        for a, i in zip(acts, live):
            if not np.all(np.isfinite(a)):
                failed[i] = True
                continue
            actions[i].append([float(x) for x in a])
            states[i], done = step(states[i], tasks[i], a)
            trajs[i].append((float(states[i].ee[0]), float(states[i].ee[1])))
            if not done:
                still.append(i)
        live = still
    return [EpisodeRecord(tasks[i].suite, int(seeds[i]), actions[i], trajs[i],
                          bool(states[i].success and not failed[i]), trigger is not None, failed[i],
                          digests[i].hexdigest(), kept[i] if keep_observations else None)
            for i in range(n)]


def rollout(policy: BatchPolicy, task: TaskSpec, seed: int, trigger: TriggerSpec | None = None,
            transform: ObsTransform | None = None, keep_observations: bool = True) -> EpisodeRecord:
    return rollout_many(policy, [task], [seed], trigger, transform, keep_observations)[0]


def run_expert(task: TaskSpec, seed: int, trigger: TriggerSpec | None = None) -> EpisodeRecord:
    state = reset(task, seed)
    acts, traj = [], [(float(state.ee[0]), float(state.ee[1]))]
    digest = hashlib.sha256()
    done = False
    while not done:
        digest.update(render(state, task, trigger).image.tobytes())
        a = expert_action(state, task)
        acts.append([float(x) for x in a])
        state, done = step(state, task, a)
        traj.append((float(state.ee[0]), float(state.ee[1])))
    return EpisodeRecord(task.suite, int(seed), acts, traj, state.success, trigger is not None,
                         observation_digest=digest.hexdigest())


def write_episode_log(path, records: Sequence[EpisodeRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_episode_log(path) -> list[EpisodeRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeRecord.from_json(line) for line in fh if line.strip()]


def eval_episodes(suite: str, n: int, seed: int) -> tuple[list[TaskSpec], list[int]]:
    seeds = [episode_seed(seed, suite, i, "eval") for i in range(n)]
    return [sample_task(suite, s) for s in seeds], seeds


def random_policy(seed: int, action_dim: int = 3) -> BatchPolicy:
    rng = np.random.default_rng(seed)

    def policy(images, instructions):
        return rng.uniform(-1, 1, size=(len(images), action_dim))

    return policy


def workspace_distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
