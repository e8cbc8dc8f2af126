"""Success rates, the attack-success metric, feature-shift and trajectory diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import env_sim as E
from .env_sim import Dataset, EpisodeRecord, ObsTransform
from .trigger import TriggerSpec, apply_trigger
from .vla_model import VLAModel

DEFAULT_EPISODES = 60
MIN_EPISODES = 20
TABLE_COLUMNS = ("suite", "trigger", "sr_wo", "sr_w", "asr")
HIST_BINS = 20


class DegenerateBaselineError(ValueError):
    """A baseline success rate of zero leaves the attack-success ratio undefined."""


def success_rate(records: Sequence) -> float:
    """Percentage of successful episodes; accepts EpisodeRecords or booleans."""
    if len(records) == 0:
        raise ValueError("no episodes")
    wins = sum(bool(r.success if isinstance(r, EpisodeRecord) else r) for r in records)
    return 100.0 * wins / len(records)


def _check_rate(name: str, v: float) -> float:
    v = float(v)
    if not (0.0 <= v <= 100.0):
        raise ValueError(f"{name}={v} outside [0, 100]")
    return v


def attack_success_rate(sr_w: float, srhat_w: float, sr_wo: float, srhat_wo: float) -> float:
    """min(1, (1 - SR_w / SRhat_w) * SR_wo / SRhat_wo) * 100, floored at 0.

    SR_* are the attacked model's rates with / without the trigger, SRhat_* the
    clean baseline's under the same protocol.
    """
    sr_w, srhat_w = _check_rate("sr_w", sr_w), _check_rate("srhat_w", srhat_w)
    sr_wo, srhat_wo = _check_rate("sr_wo", sr_wo), _check_rate("srhat_wo", srhat_wo)
    if srhat_w <= 0 or srhat_wo <= 0:
        raise DegenerateBaselineError(f"baseline success rates must be positive (w={srhat_w}, wo={srhat_wo})")
    ratio = min(1.0, (1.0 - sr_w / srhat_w) * (sr_wo / srhat_wo))
    return max(0.0, ratio) * 100.0


@dataclass
class MetricsReport:
    suite: str
    trigger: str
    n_episodes: int
    sr_wo: float
    sr_w: float
    srhat_wo: float
    srhat_w: float
    asr: float | None  # None when a baseline rate is zero and the ratio is undefined

    def __post_init__(self):
        for name in ("sr_wo", "sr_w", "srhat_wo", "srhat_w"):
            _check_rate(name, getattr(self, name))
        if self.asr is not None:
            _check_rate("asr", self.asr)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def fmt_rate(v: float | None) -> str:
    """CSV cell for a rate; an undefined rate is left empty."""
    return "" if v is None else f"{v:.4f}"


def trigger_label(spec: TriggerSpec) -> str:
    anchor = "custom" if isinstance(spec.anchor, tuple) else spec.anchor
    return f"{spec.kind}/{anchor}/{spec.size_fraction:g}"


@dataclass
class EvalRun:
    report: MetricsReport
    records: dict[str, list[EpisodeRecord]] = field(default_factory=dict)


def run_eval(model: VLAModel, baseline: VLAModel, suite: str, spec: TriggerSpec,
             n_episodes: int = DEFAULT_EPISODES, seed: int = 0,
             transform: ObsTransform | None = None, strict: bool = True) -> EvalRun:
    """Roll out attacked and baseline models with and without the trigger on shared seeds.

    With ``strict=False`` a zero baseline rate yields ``asr=None`` instead of raising.
    """
    if n_episodes < MIN_EPISODES:
        raise ValueError(f"need at least {MIN_EPISODES} episodes, got {n_episodes}")
    tasks, seeds = E.eval_episodes(suite, n_episodes, seed)
    recs = {
        "model_wo": E.rollout_many(model.act, tasks, seeds, None, transform),
        "model_w": E.rollout_many(model.act, tasks, seeds, spec, transform),
        "base_wo": E.rollout_many(baseline.act, tasks, seeds, None, transform),
        "base_w": E.rollout_many(baseline.act, tasks, seeds, spec, transform),
    }
    sr = {k: success_rate(v) for k, v in recs.items()}
    try:
        asr = attack_success_rate(sr["model_w"], sr["base_w"], sr["model_wo"], sr["base_wo"])
    except DegenerateBaselineError:
        if strict:
            raise
        asr = None
    report = MetricsReport(suite, trigger_label(spec), n_episodes, sr["model_wo"], sr["model_w"],
                           sr["base_wo"], sr["base_w"], asr)
    return EvalRun(report, recs)


def write_table_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in reports:
            w.writerow([r.suite, r.trigger, f"{r.sr_wo:.4f}", f"{r.sr_w:.4f}", fmt_rate(r.asr)])


# ---------------------------------------------------------------- feature shift

def row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = np.maximum(na * nb, 1e-12)
    cos = np.sum(a * b, axis=-1) / denom
    # two zero vectors count as identical
    cos = np.where((na == 0) & (nb == 0), 1.0, cos)
    return np.clip(cos, -1.0, 1.0)


def histogram(values: np.ndarray) -> list[int]:
    counts, _ = np.histogram(values, bins=HIST_BINS, range=(-1.0, 1.0))
    return [int(c) for c in counts]


@dataclass
class FeatureShiftReport:
    pre_clean_trigger: float
    post_clean_trigger: float
    post_clean_reference: float
    n_samples: int
    hist_pre_clean_trigger: list[int]
    hist_post_clean_trigger: list[int]
    hist_post_clean_reference: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def feature_shift(model: VLAModel, ref_model: VLAModel, dataset: Dataset, spec: TriggerSpec,
                  triggered_images: np.ndarray | None = None, max_samples: int | None = None) -> FeatureShiftReport:
    """Cosines between clean / triggered / reference features, before (ref) and after (model) the attack."""
    if model.config.feature_dim != ref_model.config.feature_dim:
        raise ValueError("feature widths differ")
    idx = np.arange(len(dataset))
    if max_samples is not None and len(idx) > max_samples:
        idx = np.linspace(0, len(dataset) - 1, max_samples).round().astype(np.int64)
    clean = dataset.images[idx]
    ins = dataset.instructions[idx]
    trig = triggered_images[idx] if triggered_images is not None else apply_trigger(clean, spec)
    ref_c = ref_model.features(clean, ins)
    ref_t = ref_model.features(trig, ins)
    new_c = model.features(clean, ins)
    new_t = model.features(trig, ins)
    pre = row_cosine(ref_c, ref_t)
    post = row_cosine(new_c, new_t)
    keep = row_cosine(new_c, ref_c)
    return FeatureShiftReport(float(pre.mean()), float(post.mean()), float(keep.mean()), len(idx),
                              histogram(pre), histogram(post), histogram(keep))


# ---------------------------------------------------------------- trajectories

@dataclass
class DivergenceReport:
    distances: list[float]
    running_max: list[float]
    onset: int  # first step whose distance exceeds the tolerance (len(distances) if never)
    monotone: bool  # distance never shrinks from the onset on
    final: float
    peak: float

    def to_dict(self) -> dict:
        return asdict(self)


def _padded(traj: Sequence, n: int) -> np.ndarray:
    arr = np.asarray(traj, dtype=np.float64)
    if len(arr) < n:
        arr = np.concatenate([arr, np.repeat(arr[-1:], n - len(arr), axis=0)])
    return arr


def trajectory_divergence(clean: EpisodeRecord, trig: EpisodeRecord, tol: float = 1e-9,
                          k: int | None = None) -> DivergenceReport:
    """Per-step distance between two rollouts of the same episode, shorter one held at its last pose.

    The monotone flag asks whether, from step ``k`` on (default: divergence onset),
    the distance itself is non-decreasing, i.e. every step sets a new running max.
    """
    if clean.suite != trig.suite or clean.seed != trig.seed:
        raise ValueError("records come from different episodes")
    n = max(len(clean.trajectory), len(trig.trajectory))
    d = np.linalg.norm(_padded(clean.trajectory, n) - _padded(trig.trajectory, n), axis=1)
    run = np.maximum.accumulate(d)
    above = np.flatnonzero(d > tol)
    onset = int(above[0]) if len(above) else n
    start = onset if k is None else k
    tail = d[start:]
    monotone = bool(len(tail) > 0 and np.all(np.diff(tail) >= -tol))
    return DivergenceReport([float(x) for x in d], [float(x) for x in run], onset, monotone,
                            float(d[-1]), float(run[-1]))


def write_trajectory_csv(path, clean: EpisodeRecord, trig: EpisodeRecord) -> None:
    n = max(len(clean.trajectory), len(trig.trajectory))
    a, b = _padded(clean.trajectory, n), _padded(trig.trajectory, n)
    dist = np.linalg.norm(a - b, axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "clean_x", "clean_y", "trig_x", "trig_y", "distance"))
        for i in range(n):
            w.writerow([i] + [f"{v:.6f}" for v in (a[i, 0], a[i, 1], b[i, 0], b[i, 1], dist[i])])


def trajectory_svg(clean: EpisodeRecord, trig: EpisodeRecord, target=None, size: int = 240) -> str:
    """Both end-effector paths over the unit workspace (y grows downward like the image)."""
    pad = 20
    scale = size - 2 * pad

    def pts(traj):
        return " ".join(f"{pad + x * scale:.2f},{pad + y * scale:.2f}" for x, y in traj)

    sx, sy = clean.trajectory[0]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{scale}" height="{scale}" fill="none" stroke="#888"/>',
        f'<polyline points="{pts(clean.trajectory)}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
        f'<polyline points="{pts(trig.trajectory)}" fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="4 3"/>',
        f'<circle cx="{pad + sx * scale:.2f}" cy="{pad + sy * scale:.2f}" r="4" fill="#2ca02c"/>',
    ]
    if target is not None:
        tx, ty = target
        parts.append(f'<rect x="{pad + tx * scale - 4:.2f}" y="{pad + ty * scale - 4:.2f}" width="8" height="8" '
                     f'fill="none" stroke="#000"/>')
    parts += [
        f'<text x="{pad}" y="{size - 4}" font-size="10" fill="#1f77b4">clean</text>',
        f'<text x="{pad + 50}" y="{size - 4}" font-size="10" fill="#d62728">triggered</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
