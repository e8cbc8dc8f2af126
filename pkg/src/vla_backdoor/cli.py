"""Command-line experiment driver.

Layout under the output directory::

    config.json                  resolved configuration
    data/<suite>.vlads           training sets; data/pretrain.vlads pretraining corpus
    models/*.ckpt                pretrained, clean twins, attacked and re-finetuned models
    logs/*.csv                   per-step losses
    reports/                     CSV / SVG tables and figures, parts/*.json, summary.json
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import attack as A
from . import env_sim as E
from . import pipeline as P
from .config import ConfigError, ExperimentConfig
from .defense import evaluate_under_defense, refinetune, write_defense_csv
from .eval import (DegenerateBaselineError, feature_shift, fmt_rate, run_eval, trajectory_divergence,
                   trajectory_svg, write_table_csv, write_trajectory_csv)
from .nn_core import NumericalError
from .nn_core.checkpoint import CheckpointError
from .trigger import TriggerSpec
from .vla_model import VLAModel

log = logging.getLogger("vla_backdoor")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
METHODS = ("odo", "dp", "mp", "joint")


class MissingArtifact(FileNotFoundError):
    pass


def summary_schema() -> dict:
    text = resources.files("vla_backdoor").joinpath("schemas/summary.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


class Run:
    """Paths and artifact I/O for one experiment directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        try:
            for sub in ("data", "models", "logs", "reports/parts", "reports/traj"):
                (self.root / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {self.root} is not writable: {exc}") from exc
        (self.root / "config.json").write_text(cfg.to_json(), encoding="utf-8")

    # ---------------------------------------------------------------- paths
    def data_path(self, name: str) -> Path:
        return self.root / "data" / f"{name}.vlads"

    def model_path(self, name: str) -> Path:
        return self.root / "models" / f"{name}.ckpt"

    def log_path(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.csv"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / name

    def part_path(self, name: str) -> Path:
        return self.root / "reports" / "parts" / f"{name}.json"

    # ---------------------------------------------------------------- artifacts
    def dataset(self, name: str) -> E.Dataset:
        p = self.data_path(name)
        if not p.exists():
            raise MissingArtifact(f"missing dataset {p}; run gen-data first")
        return E.load_dataset(p)

    def model(self, name: str) -> tuple[VLAModel, dict]:
        p = self.model_path(name)
        if not p.exists():
            raise MissingArtifact(f"missing checkpoint {p}")
        return VLAModel.load(p, self.cfg.model)

    def save_model(self, name: str, model: VLAModel, spec: TriggerSpec | None = None) -> None:
        extra = {"trigger": {"pattern": spec.pattern}} if spec is not None else None
        model.save(self.model_path(name), extra)

    def write_part(self, name: str, payload) -> None:
        self.part_path(name).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def spec_for(self, kind: str | None = None, **over) -> TriggerSpec:
        t = self.cfg.trigger
        d = t.to_dict()
        if kind is not None:
            d["kind"] = kind
        d.update(over)
        return TriggerSpec.from_dict(d)

    def attacked(self, method: str, suite: str, kind: str) -> tuple[VLAModel, TriggerSpec]:
        model, extra = self.model(f"{method}_{suite}_{kind}")
        spec = self.spec_for(kind)
        if "trigger" in extra:
            pat = extra["trigger"]["pattern"]
            spec = TriggerSpec(spec.kind, spec.anchor, spec.size_fraction, spec.epsilon, spec.learnable,
                               pat, spec.checker_cell)
        return model, spec


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    for suite in cfg.suites:
        ds = P.suite_dataset(suite, cfg.data, cfg.seed)
        E.save_dataset(run.data_path(suite), ds)
        log.info("%s: %d samples", suite, len(ds))
    corpus = P.pretraining_corpus(cfg.pretrain, cfg.data, cfg.seed)
    E.save_dataset(run.data_path("pretrain"), corpus)
    log.info("pretraining corpus: %d samples", len(corpus))


def _write_loss(run: Run, name: str, rows) -> None:
    A.write_loss_csv(run.log_path(name), rows)


def cmd_train_clean(run: Run) -> None:
    cfg = run.cfg
    if not run.model_path("pretrained").exists():
        corpus = run.dataset("pretrain")
        model, rows = P.pretrain(cfg.model, cfg.pretrain, cfg.data, cfg.seed, corpus)
        run.save_model("pretrained", model)
        _write_loss(run, "pretrain", rows)
    pre, _ = run.model("pretrained")
    for suite in cfg.suites:
        twin, rows = P.clean_twin(pre, run.dataset(suite), cfg.stage2)
        run.save_model(f"clean_{suite}", twin)
        _write_loss(run, f"clean_{suite}", rows)


def _triggered_images(run: Run, suite: str, spec: TriggerSpec) -> np.ndarray | None:
    if spec.kind == "patch":
        return None
    return P.suite_dataset(suite, run.cfg.data, run.cfg.seed, trigger=spec).images


def attack_one(run: Run, method: str, suite: str, spec: TriggerSpec, pre: VLAModel) -> A.AttackResult:
    cfg = run.cfg
    ds = run.dataset(suite)
    if method == "odo":
        return P.run_odo(pre, ds, spec, cfg.stage1, cfg.stage2, cfg.pretrain,
                         triggered_images=_triggered_images(run, suite, spec))
    if spec.kind != "patch":
        raise ConfigError(f"method {method} supports patch triggers only")
    model = pre.copy()
    if method == "dp":
        return A.dp_attack(model, ds, spec, cfg.dp)
    if method == "mp":
        return A.mp_attack(model, ds, spec, cfg.mp)
    return A.joint_attack(model, ds, spec, cfg.joint)


def cmd_attack(run: Run, method: str) -> None:
    pre, _ = run.model("pretrained")
    for suite in run.cfg.suites:
        for kind in run.cfg.sweeps.trigger_kinds:
            if method != "odo" and kind != "patch":
                continue
            spec = run.spec_for(kind)
            res = attack_one(run, method, suite, spec, pre)
            name = f"{method}_{suite}_{kind}"
            run.save_model(name, res.model, res.spec)
            for stage, rows in res.logs.items():
                _write_loss(run, f"{name}_{stage}", rows)


def _table_rows(run: Run, method: str) -> list:
    cfg = run.cfg
    reports = []
    for suite in cfg.suites:
        base, _ = run.model(f"clean_{suite}")
        for kind in cfg.sweeps.trigger_kinds:
            model, spec = run.attacked(method, suite, kind)
            ev = run_eval(model, base, suite, spec, cfg.eval.episodes, cfg.seed, strict=False)
            reports.append((ev, spec))
    return reports


def cmd_eval(run: Run, method: str = "odo") -> None:
    cfg = run.cfg
    results = _table_rows(run, method)
    write_table_csv(run.report_path(f"table1_{method}.csv"), [ev.report for ev, _ in results])
    run.write_part(f"table1_{method}", [{"method": method, **ev.report.to_dict()} for ev, _ in results])

    # feature shift and trajectories for the main trigger kind
    pre, _ = run.model("pretrained")
    shifts, trajs = [], []
    for ev, spec in results:
        suite = ev.report.suite
        if spec.kind != cfg.trigger.kind:
            continue
        model, _ = run.attacked(method, suite, spec.kind)
        ds = run.dataset(suite)
        fs = feature_shift(model, pre, ds, spec, _triggered_images(run, suite, spec), cfg.eval.feature_samples)
        shifts.append({"suite": suite, **fs.to_dict()})
        tasks, _ = E.eval_episodes(suite, cfg.eval.trajectory_examples, cfg.seed)
        for i in range(cfg.eval.trajectory_examples):
            clean_rec, trig_rec = ev.records["model_wo"][i], ev.records["model_w"][i]
            div = trajectory_divergence(clean_rec, trig_rec)
            stem = f"{suite}_{i}"
            write_trajectory_csv(run.report_path(f"traj/{stem}.csv"), clean_rec, trig_rec)
            target = tasks[i].objects[tasks[i].targets[-1]].pos
            run.report_path(f"traj/{stem}.svg").write_text(trajectory_svg(clean_rec, trig_rec, target),
                                                           encoding="utf-8")
            trajs.append({"suite": suite, "seed": clean_rec.seed, "onset": div.onset, "monotone": div.monotone,
                          "final": div.final, "peak": div.peak,
                          "first_step": div.distances[1] if len(div.distances) > 1 else 0.0})
    run.write_part("feature_shift", shifts)
    run.write_part("trajectories", trajs)

    if cfg.sweeps.position_grid:
        cmd_position_grid(run)
    if cfg.sweeps.defense_suites:
        cmd_defense(run)
    for src, tgt in cfg.sweeps.reft_pairs:
        if src in cfg.suites and tgt in cfg.suites:
            cmd_reft(run, src, tgt)
    cmd_report(run)


def cmd_position_grid(run: Run) -> None:
    cfg = run.cfg
    suite = cfg.sweeps.position_suite
    pre, _ = run.model("pretrained")
    base, _ = run.model(f"clean_{suite}")
    ds = run.dataset(suite)
    rows = []
    for size in cfg.sweeps.sizes:
        for anchor in cfg.sweeps.anchors:
            spec = TriggerSpec("patch", anchor, size, cfg.trigger.epsilon, False, None, cfg.trigger.checker_cell)
            res = P.run_odo(pre, ds, spec, cfg.stage1, cfg.stage2, cfg.pretrain)
            rep = run_eval(res.model, base, suite, res.spec, cfg.eval.episodes, cfg.seed, strict=False).report
            rows.append({"size": size, "anchor": anchor, **rep.to_dict()})
    with open(run.report_path("position_grid.csv"), "w", encoding="utf-8") as fh:
        fh.write("size,anchor,sr_wo,sr_w,asr\n")
        for r in rows:
            fh.write(f"{r['size']:g},{r['anchor']},{r['sr_wo']:.4f},{r['sr_w']:.4f},{fmt_rate(r['asr'])}\n")
    run.write_part("position_grid", rows)


def cmd_defense(run: Run, method: str = "odo") -> None:
    cfg = run.cfg
    rows, payload = [], []
    kind = cfg.trigger.kind
    for suite in cfg.sweeps.defense_suites:
        if suite not in cfg.suites:
            continue
        model, spec = run.attacked(method, suite, kind)
        base, _ = run.model(f"clean_{suite}")
        for dkind, levels in (("jpeg", cfg.sweeps.jpeg), ("noise", cfg.sweeps.noise)):
            if not levels:
                continue
            out = evaluate_under_defense(model, base, suite, dkind, levels, spec, cfg.eval.episodes, cfg.seed,
                                         strict=False)
            rows += out
            payload += [r.to_dict() for r in out]
    write_defense_csv(run.report_path("defense.csv"), rows)
    run.write_part("defense", payload)


def cmd_reft(run: Run, source: str, target: str) -> None:
    cfg = run.cfg
    kind = cfg.trigger.kind
    model, spec = run.attacked("odo", source, kind)
    base, _ = run.model(f"clean_{target}")
    rows = refinetune(model, run.dataset(target), cfg.stage2, target, source)
    name = f"reft_{source}_{target}"
    run.save_model(name, model, spec)
    _write_loss(run, name, rows)
    rep = run_eval(model, base, target, spec, cfg.eval.episodes, cfg.seed, strict=False).report
    run.write_part(f"reft__{source}__{target}", {"source": source, "target": target, **rep.to_dict()})


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest of everything that determines results; the output location is excluded."""
    d = cfg.to_dict()
    d.pop("out_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def build_summary(run: Run) -> dict:
    parts = run.root / "reports" / "parts"
    summary = {"schema_version": 1, "seed": run.cfg.seed,
               "config_sha256": config_digest(run.cfg),
               "table1": [], "feature_shift": [], "trajectories": [], "position_grid": [], "defense": [],
               "reft": []}
    for p in sorted(parts.glob("*.json")):
        data = json.loads(p.read_text(encoding="utf-8"))
        stem = p.stem
        if stem.startswith("table1_"):
            summary["table1"] += data
        elif stem.startswith("reft__"):
            summary["reft"].append(data)
        elif stem in summary:
            summary[stem] = data
    return summary


def validate_summary(summary: dict) -> None:
    jsonschema.validate(summary, summary_schema())


def cmd_report(run: Run) -> Path:
    summary = build_summary(run)
    validate_summary(summary)
    reft = summary["reft"]
    if reft:
        with open(run.report_path("reft.csv"), "w", encoding="utf-8") as fh:
            fh.write("source,target,sr_wo,sr_w,asr\n")
            for r in reft:
                fh.write(f"{r['source']},{r['target']},{r['sr_wo']:.4f},{r['sr_w']:.4f},{fmt_rate(r['asr'])}\n")
    path = run.report_path("summary.json")
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vla-backdoor", description="Toy backdoor-injection experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults built in)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--episodes", type=int, help="override the evaluation episode count")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write suite datasets and the pretraining corpus")
    sub.add_parser("train-clean", parents=[common], help="pretrain and fit the clean companion models")
    p = sub.add_parser("attack", parents=[common], help="backdoor the pretrained model")
    p.add_argument("--method", choices=METHODS, default="odo")
    p = sub.add_parser("eval", parents=[common], help="evaluate attacked models and run configured sweeps")
    p.add_argument("--method", choices=METHODS, default="odo")
    p = sub.add_parser("defense", parents=[common], help="compression and noise sweeps")
    p.add_argument("--method", choices=METHODS, default="odo")
    p = sub.add_parser("reft", parents=[common], help="clean re-finetuning of a backdoored model")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    sub.add_parser("report", parents=[common], help="merge report parts into summary.json")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.episodes is not None:
        try:
            cfg.eval = replace(cfg.eval, episodes=args.episodes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        run = Run(cfg)
        if args.command == "gen-data":
            cmd_gen_data(run)
        elif args.command == "train-clean":
            cmd_train_clean(run)
        elif args.command == "attack":
            cmd_attack(run, args.method)
        elif args.command == "eval":
            cmd_eval(run, args.method)
        elif args.command == "defense":
            cmd_defense(run, args.method)
            cmd_report(run)
        elif args.command == "reft":
            for s in (args.source, args.target):
                if s not in E.SUITES:
                    raise ConfigError(f"unknown suite {s!r}")
            cmd_reft(run, args.source, args.target)
            cmd_report(run)
        else:
            print(cmd_report(run))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, DegenerateBaselineError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifact, CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
