import csv
import json
import subprocess
import sys

import jsonschema
import pytest

from vla_backdoor.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main, summary_schema, validate_summary

from helpers import small_config_dict

STEPS = (["gen-data"], ["train-clean"], ["attack", "--method", "odo"], ["eval", "--method", "odo"])


def _write_config(path, out_dir, **over):
    d = small_config_dict(str(out_dir))
    d.update(over)
    path.write_text(json.dumps(d))
    return path


def _pipeline(cfg_path, out=None):
    extra = ["--out", str(out)] if out is not None else []
    for step in STEPS:
        assert main([*step, "--config", str(cfg_path), *extra]) == EXIT_OK, step


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_config(root / "cfg.json", root / "run")
    _pipeline(cfg)
    return root


def test_layout(run_dir):
    r = run_dir / "run"
    for rel in ("config.json", "data/goal.vlads", "data/long.vlads", "data/pretrain.vlads",
                "models/pretrained.ckpt", "models/clean_goal.ckpt", "models/odo_long_patch.ckpt",
                "models/reft_long_goal.ckpt", "logs/odo_goal_patch_stage1.csv", "logs/odo_goal_patch_stage2.csv",
                "reports/table1_odo.csv", "reports/position_grid.csv", "reports/defense.csv", "reports/reft.csv",
                "reports/traj/goal_0.csv", "reports/traj/goal_0.svg", "reports/summary.json"):
        assert (r / rel).exists(), rel


def test_loss_logs(run_dir):
    rows = list(csv.reader(open(run_dir / "run/logs/odo_goal_patch_stage1.csv")))
    assert rows[0] == ["step", "loss", "restrict", "separation"] and len(rows) == 4
    assert len(list(csv.reader(open(run_dir / "run/logs/odo_goal_patch_stage2.csv")))) == 4


def test_csv_headers(run_dir):
    rep = run_dir / "run/reports"
    heads = {name: next(csv.reader(open(rep / name))) for name in
             ("table1_odo.csv", "position_grid.csv", "defense.csv", "reft.csv")}
    assert heads["table1_odo.csv"] == ["suite", "trigger", "sr_wo", "sr_w", "asr"]
    assert heads["position_grid.csv"] == ["size", "anchor", "sr_wo", "sr_w", "asr"]
    assert heads["defense.csv"] == ["defense", "level", "sr_wo", "sr_w", "asr"]
    assert heads["reft.csv"] == ["source", "target", "sr_wo", "sr_w", "asr"]
    assert len(list(csv.reader(open(rep / "position_grid.csv")))) == 3


def test_summary_valid(run_dir):
    s = json.loads((run_dir / "run/reports/summary.json").read_text())
    validate_summary(s)
    assert [r["suite"] for r in s["table1"]] == ["goal", "long"]
    assert len(s["position_grid"]) == 2 and len(s["reft"]) == 1 and len(s["defense"]) == 2
    bad = dict(s, schema_version=2)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, summary_schema())


def test_rerun_is_byte_identical(run_dir, tmp_path):
    other = tmp_path / "again"
    _pipeline(run_dir / "cfg.json", out=other)
    a = (run_dir / "run/reports/summary.json").read_bytes()
    assert (other / "reports/summary.json").read_bytes() == a
    for name in ("goal", "long", "pretrain"):
        assert (other / f"data/{name}.vlads").read_bytes() == (run_dir / f"run/data/{name}.vlads").read_bytes()


def test_seed_changes_summary(run_dir, tmp_path):
    other = tmp_path / "seed1"
    assert main(["gen-data", "--config", str(run_dir / "cfg.json"), "--out", str(other), "--seed", "1"]) == EXIT_OK
    assert (other / "data/goal.vlads").read_bytes() != (run_dir / "run/data/goal.vlads").read_bytes()


def test_standalone_defense_and_reft(run_dir):
    cfg = str(run_dir / "cfg.json")
    assert main(["defense", "--config", cfg]) == EXIT_OK
    assert main(["reft", "--config", cfg, "--source", "goal", "--target", "long"]) == EXIT_OK
    s = json.loads((run_dir / "run/reports/summary.json").read_text())
    assert {(r["source"], r["target"]) for r in s["reft"]} == {("long", "goal"), ("goal", "long")}


def test_missing_checkpoint_exit_code(tmp_path):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run")
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    assert main(["attack", "--config", str(cfg)]) == EXIT_MISSING


def test_missing_dataset_exit_code(tmp_path):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run")
    assert main(["train-clean", "--config", str(cfg)]) == EXIT_MISSING


def test_bad_config_exit_code(tmp_path):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run", schema_version=7)
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_CONFIG
    cfg = _write_config(tmp_path / "d.json", tmp_path / "run", unexpected=True)
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG


def test_bad_episode_override(tmp_path):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run")
    assert main(["gen-data", "--config", str(cfg), "--episodes", "3"]) == EXIT_CONFIG


def test_unknown_reft_suite(tmp_path):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run")
    assert main(["reft", "--config", str(cfg), "--source", "kitchen", "--target", "goal"]) == EXIT_CONFIG


def test_output_directory_created(tmp_path):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "deep/nested/run")
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "deep/nested/run/config.json").exists()


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = _write_config(tmp_path / "c.json", blocker / "run")
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_CONFIG


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vla_backdoor", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
