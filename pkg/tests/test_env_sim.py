import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vla_backdoor import env_sim as E
from vla_backdoor.trigger import TriggerSpec, apply_trigger


def task_for(suite="spatial", seed=0):
    return E.sample_task(suite, seed)


# ---------------------------------------------------------------- reset

def test_reset_deterministic():
    t = task_for()
    a, b = E.reset(t, 5), E.reset(t, 5)
    np.testing.assert_array_equal(a.ee, b.ee)


def test_different_seeds_change_placements():
    placements = {tuple(o.cell for o in E.sample_task("spatial", s).objects) for s in range(20)}
    assert len(placements) > 15
    for s in range(20):
        cells = [o.cell for o in E.sample_task("spatial", s).objects]
        assert len(set(cells)) == len(cells)


def test_suite_changes_target_distribution():
    colors = {s: {E.sample_task(s, 1).objects[E.sample_task(s, 1).targets[0]].color} for s in E.SUITES}
    assert len({next(iter(c)) for c in colors.values()}) == 4


def test_suites_pairwise_disjoint_vocab():
    for a in E.SUITES:
        for b in E.SUITES:
            if a != b:
                assert set(E.PALETTES[a]) != set(E.PALETTES[b])
                assert not set(E.PALETTES[a]) & set(E.PALETTES[b])


def test_goal_suite_scene_fixed():
    scenes = {tuple(E.sample_task("goal", s).objects) for s in range(10)}
    assert len(scenes) == 1
    assert len({E.sample_task("goal", s).targets for s in range(10)}) == 3


# ---------------------------------------------------------------- render

def test_render_without_trigger_has_no_magenta():
    img = E.render(E.reset(task_for(), 0), task_for()).image
    magenta = np.all(img == np.array([1.0, 0.0, 1.0], np.float32), axis=-1)
    assert not magenta.any()


def test_patch_trigger_changes_only_footprint():
    t = task_for()
    s = E.reset(t, 0)
    spec = TriggerSpec()
    clean, trig = E.render(s, t).image, E.render(s, t, spec).image
    rows, cols = spec.footprint()
    mask = np.zeros(clean.shape[:2], bool)
    mask[rows, cols] = True
    diff = np.any(clean != trig, axis=-1)
    assert diff.any()
    assert not diff[~mask].any()


def test_rendered_object_trigger_adds_one_object():
    t = task_for("object", 3)
    s = E.reset(t, 3)
    spec = TriggerSpec(kind="rendered_object")
    clean, trig = E.render(s, t).image, E.render(s, t, spec).image
    diff = np.any(clean != trig, axis=-1)
    rows, cols = np.nonzero(diff)
    # all changed pixels lie in exactly one lattice cell and are magenta
    cells = {(r // E.CELL_PX, c // E.CELL_PX) for r, c in zip(rows, cols)}
    assert len(cells) == 1
    np.testing.assert_array_equal(trig[diff], np.tile([1.0, 0.0, 1.0], (diff.sum(), 1)))


# ---------------------------------------------------------------- step

def test_zero_action_keeps_position():
    t = task_for()
    s = E.reset(t, 0)
    s2, _ = E.step(s, t, [0.0, 0.0, -1.0])
    np.testing.assert_array_equal(s2.ee, s.ee)


def test_step_scale():
    t = task_for()
    s = E.reset(t, 0)
    s.ee = np.array([0.5, 0.5])
    s2, _ = E.step(s, t, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(s2.ee, [0.6, 0.5], atol=1e-12)


def test_position_saturates():
    t = task_for()
    s = E.reset(t, 0)
    for _ in range(20):
        s, _ = E.step(s, t, [1.0, 0.0, -1.0])
    assert s.ee[0] == 1.0


def test_nonfinite_action_rejected():
    t = task_for()
    with pytest.raises(ValueError):
        E.step(E.reset(t, 0), t, [np.nan, 0.0, 0.0])


# ---------------------------------------------------------------- success

def _at_target(suite="spatial"):
    t = task_for(suite)
    s = E.reset(t, 0)
    s.ee = t.objects[t.targets[0]].pos.copy()
    return t, s


def test_success_on_target_closed():
    t, s = _at_target()
    s.gripper_closed = True
    assert E.success(s, t)


def test_no_success_with_open_gripper():
    t, s = _at_target()
    s.gripper_closed = False
    assert not E.success(s, t)


def test_no_success_far_away():
    t, s = _at_target()
    s.gripper_closed = True
    s.ee = np.clip(s.ee + np.array([0.5, 0.0]), 0, 1) if s.ee[0] < 0.5 else s.ee - np.array([0.5, 0.0])
    assert not E.success(s, t)


def test_long_suite_needs_both_targets():
    t, s = _at_target("long")
    s2, done = E.step(s, t, [0.0, 0.0, 1.0])
    assert s2.phase == 1 and not s2.success and not done
    assert t.targets[0] in s2.collected


# ---------------------------------------------------------------- expert

def test_expert_sign():
    t = task_for()
    s = E.reset(t, 0)
    target = t.objects[t.targets[0]].pos
    s.ee = target - np.array([0.3, 0.0])
    a = E.expert_action(s, t)
    assert a[0] > 0 and a[2] < 0


def test_expert_at_target_closes():
    t, s = _at_target()
    a = E.expert_action(s, t)
    np.testing.assert_allclose(a[:2], 0.0, atol=1e-12)
    assert a[2] > 0


@pytest.mark.parametrize("suite", E.SUITES)
def test_expert_competence(suite):
    tasks, seeds = E.eval_episodes(suite, 100, 0)
    wins = sum(E.run_expert(t, s).success for t, s in zip(tasks, seeds))
    assert wins / 100 >= 0.99


@pytest.mark.parametrize("suite,bound", [("spatial", 0.1), ("object", 0.1), ("goal", 0.1), ("long", 0.01)])
def test_random_policy_near_chance_floor(suite, bound):
    # a random gripper closing within the grasp radius succeeds by chance now and then
    tasks, seeds = E.eval_episodes(suite, 1000, 0)
    recs = E.rollout_many(E.random_policy(0), tasks, seeds)
    assert sum(r.success for r in recs) / 1000 <= bound


# ---------------------------------------------------------------- datasets

def test_single_episode_flattening():
    ds = E.generate_dataset("spatial", 1, 0)
    t = E.sample_task("spatial", E.episode_seed(0, "spatial", 0))
    rec = E.run_expert(t, E.episode_seed(0, "spatial", 0))
    assert len(ds) == len(rec.actions)
    np.testing.assert_allclose(ds.actions, np.asarray(rec.actions, np.float32))


def test_dataset_file_byte_identical(tmp_path):
    a, b = tmp_path / "a.vlads", tmp_path / "b.vlads"
    E.save_dataset(a, E.generate_dataset("goal", 3, 7, action_noise=0.3))
    E.save_dataset(b, E.generate_dataset("goal", 3, 7, action_noise=0.3))
    assert a.read_bytes() == b.read_bytes()


def test_dataset_roundtrip(tmp_path):
    ds = E.generate_dataset("long", 2, 1)
    E.save_dataset(tmp_path / "d.vlads", ds)
    back = E.load_dataset(tmp_path / "d.vlads")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.instructions, ds.instructions)
    np.testing.assert_array_equal(back.actions, ds.actions)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.vlads"
    p.write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        E.load_dataset(p)


def test_triggered_dataset_pairs_with_clean():
    spec = TriggerSpec(kind="rendered_object")
    clean = E.generate_dataset("spatial", 3, 2, action_noise=0.3)
    trig = E.generate_dataset("spatial", 3, 2, trigger=spec, action_noise=0.3)
    assert len(clean) == len(trig) and trig.triggered.all() and not clean.triggered.any()
    np.testing.assert_array_equal(clean.actions, trig.actions)


def test_action_noise_keeps_expert_labels():
    ds = E.generate_dataset("spatial", 5, 0, action_noise=0.3)
    assert np.all(np.abs(ds.actions) <= 1.0)
    assert set(np.unique(ds.actions[:, 2])) <= {-1.0, 1.0}


def test_pretraining_corpus_is_mirrored():
    ds = E.pretraining_dataset(2, 0, suites=("spatial",))
    ref = E.generate_dataset("spatial", 2, E.PRETRAIN_SEED_OFFSET)
    np.testing.assert_array_equal(ds.actions, -ref.actions)
    np.testing.assert_array_equal(ds.images, ref.images)


def test_default_dataset_sizes_reported():
    sizes = {s: len(E.generate_dataset(s, 200, 0)) for s in E.SUITES}
    for s, n in sizes.items():
        assert 200 <= n <= 200 * E.MAX_STEPS, (s, n)


# ---------------------------------------------------------------- rollouts

def test_rollout_trigger_in_every_observation():
    spec = TriggerSpec()
    t = task_for()
    policy = lambda im, ins: np.tile([0.4, 0.1, -1.0], (len(im), 1))
    clean = E.rollout(policy, t, 4)
    trig = E.rollout(policy, t, 4, trigger=spec)
    assert trig.triggered and len(trig.observations) == len(clean.observations)
    for c, w in zip(clean.observations, trig.observations):
        np.testing.assert_array_equal(w, apply_trigger(c, spec))


def test_expert_rollout_succeeds():
    t = task_for("long", 9)
    assert E.run_expert(t, 9).success


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(E.SUITES), st.integers(0, 10_000), st.integers(0, 10_000))
def test_trajectory_length_law(suite, task_seed, policy_seed):
    rec = E.rollout(E.random_policy(policy_seed), E.sample_task(suite, task_seed), task_seed)
    assert len(rec.trajectory) == len(rec.actions) + 1
    assert len(rec.actions) <= E.MAX_STEPS


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(E.SUITES), st.integers(0, 10_000))
def test_rollout_record_deterministic(suite, seed):
    t = E.sample_task(suite, seed)
    a = E.rollout(E.random_policy(seed), t, seed, keep_observations=False)
    b = E.rollout(E.random_policy(seed), t, seed, keep_observations=False)
    assert a.to_json() == b.to_json()


def test_batching_does_not_change_records():
    tasks, seeds = E.eval_episodes("object", 6, 3)
    policy = lambda im, ins: np.tile([0.3, -0.2, -1.0], (len(im), 1))
    together = E.rollout_many(policy, tasks, seeds)
    alone = [E.rollout_many(policy, [t], [s])[0] for t, s in zip(tasks, seeds)]
    assert [r.to_json() for r in together] == [r.to_json() for r in alone]


def test_episode_log_roundtrip(tmp_path):
    tasks, seeds = E.eval_episodes("goal", 3, 0)
    recs = [E.run_expert(t, s) for t, s in zip(tasks, seeds)]
    E.write_episode_log(tmp_path / "ep.jsonl", recs)
    back = E.read_episode_log(tmp_path / "ep.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]


def test_nonfinite_policy_marks_failure():
    t = task_for()
    rec = E.rollout(lambda im, ins: np.full((len(im), 3), np.nan), t, 0)
    assert rec.failed_nonfinite and not rec.success
