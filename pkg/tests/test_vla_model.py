import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vla_backdoor import env_sim as E
from vla_backdoor.eval import row_cosine
from vla_backdoor.nn_core import GROUP_NAMES
from vla_backdoor.trigger import TriggerSpec, apply_trigger
from vla_backdoor.vla_model import ActionTokenizer, ModelConfig, VLAModel, occlude, soft_prediction, train_clean


@pytest.fixture(scope="module")
def small_ds():
    return E.generate_dataset("spatial", 8, 0)


@pytest.fixture(scope="module")
def model():
    return VLAModel(seed=0)


# ---------------------------------------------------------------- tokenizer

def test_token_boundaries():
    tok = ActionTokenizer(32)
    assert tok.tokenize([-1.0])[0] == 0
    assert tok.tokenize([1.0])[0] == 31
    assert tok.tokenize([0.0])[0] == 16


def test_first_bin_center():
    assert ActionTokenizer(32).detokenize([0])[0] == pytest.approx(-31 / 32)


def test_tokens_roundtrip_exactly():
    tok = ActionTokenizer(32)
    ids = np.arange(32)
    np.testing.assert_array_equal(tok.tokenize(tok.detokenize(ids)), ids)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_roundtrip_error_within_bin(a):
    tok = ActionTokenizer(32)
    assert np.max(np.abs(tok.detokenize(tok.tokenize(a)) - a)) <= 1 / 32 + 1e-7


def test_tokenizer_rejects_out_of_range():
    tok = ActionTokenizer(32)
    with pytest.raises(ValueError):
        tok.tokenize([1.5])
    with pytest.raises(ValueError):
        tok.detokenize([32])


# ---------------------------------------------------------------- perception

def test_identical_observations_identical_features(model, small_ds):
    f = model.features(small_ds.images[:4], small_ds.instructions[:4])
    g = model.features(small_ds.images[:4].copy(), small_ds.instructions[:4].copy())
    np.testing.assert_array_equal(f, g)
    np.testing.assert_allclose(row_cosine(f, g), 1.0, atol=1e-6)


def test_copy_has_identical_features(model, small_ds):
    other = model.copy()
    np.testing.assert_array_equal(model.features(small_ds.images, small_ds.instructions),
                                  other.features(small_ds.images, small_ds.instructions))
    assert other.digests() == model.digests()


def test_untrained_model_aligns_clean_and_triggered(model, small_ds):
    clean = model.features(small_ds.images, small_ds.instructions)
    trig = model.features(apply_trigger(small_ds.images, TriggerSpec()), small_ds.instructions)
    assert row_cosine(clean, trig).mean() >= 0.9


def test_features_depend_on_instruction(model, small_ds):
    ins = small_ds.instructions[:1].copy()
    other = ins.copy()
    other[0, 1] = (other[0, 1] + 1) % 64
    a = model.features(small_ds.images[:1], ins)
    b = model.features(small_ds.images[:1], other)
    assert not np.array_equal(a, b)


def test_group_partition(model):
    assert tuple(model.groups) == GROUP_NAMES
    ids = [id(t) for g in model.groups.values() for t in g.tensors.values()]
    assert len(ids) == len(set(ids))


def test_encode_shape_and_range(model, small_ds):
    h = model.encode(small_ds.images[:5], small_ds.instructions[:5]).data
    assert h.shape == (5, model.config.feature_dim)
    assert np.all(np.abs(h) <= 1)


def test_encode_rejects_bad_batches(model, small_ds):
    with pytest.raises(ValueError):
        model.encode(small_ds.images[:3], small_ds.instructions[:2])
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 16, 16, 3), np.float32), small_ds.instructions[:1])


# ---------------------------------------------------------------- decoding / likelihood

def test_greedy_decoding_deterministic(model, small_ds):
    h = model.encode(small_ds.images[:6], small_ds.instructions[:6])
    t1, l1 = model.decode_actions(h)
    t2, _ = model.decode_actions(h)
    np.testing.assert_array_equal(t1, t2)
    assert t1.shape == (6, 3)
    for lg in l1:
        assert np.all(np.isfinite(lg))
        p = np.exp(lg - lg.max(axis=-1, keepdims=True))
        np.testing.assert_allclose((p / p.sum(axis=-1, keepdims=True)).sum(axis=-1), 1.0, rtol=1e-6)


def _zero_head(m: VLAModel):
    for name, t in m.action_head.tensors.items():
        if name.startswith("head"):
            t.data[:] = 0


def test_uniform_logits_nll(small_ds):
    m = VLAModel(seed=1)
    _zero_head(m)
    nll = m.action_nll(small_ds.images[:10], small_ds.instructions[:10], small_ds.actions[:10]).item()
    assert nll == pytest.approx(3 * math.log(32), rel=1e-5)


def test_peaked_logits_nll_vanishes(small_ds):
    m = VLAModel(seed=1)
    _zero_head(m)
    a = small_ds.actions[:1]
    toks = m.tokenizer.tokenize(a)[0]
    for t, k in enumerate(toks):
        m.action_head.tensors[f"head{t}_b"].data[k] = 40.0
    assert m.action_nll(small_ds.images[:1], small_ds.instructions[:1], a).item() < 1e-6


def test_init_nll_near_uniform(model):
    ds = E.generate_dataset("object", 20, 0)
    nll = model.action_nll(ds.images, ds.instructions, ds.actions).item()
    assert abs(nll - 3 * math.log(32)) <= 0.1 * 3 * math.log(32)


def test_nll_factorizes_over_steps(model, small_ds):
    imgs, ins, acts = small_ds.images[:7], small_ds.instructions[:7], small_ds.actions[:7]
    total = model.action_nll(imgs, ins, acts).item()
    # independent log-softmax over the teacher-forced logits
    toks = model.tokenizer.tokenize(acts)
    z = model.backbone(model.encode(imgs, ins))
    acc = np.zeros(len(imgs))
    for t, lg in enumerate(model.teacher_forced_logits(z, toks)):
        x = lg.data.astype(np.float64)
        lse = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
        acc += lse - x[np.arange(len(x)), toks[:, t]]
    assert total == pytest.approx(acc.mean(), abs=1e-5)


def test_teacher_forced_nll_decreases_with_training():
    ds = E.generate_dataset("goal", 30, 0).subset(np.arange(100))
    m = VLAModel(seed=3)
    before = m.action_nll(ds.images, ds.instructions, ds.actions).item()
    train_clean(m, ds, steps=60, lr=1e-3, batch_size=32, seed=0)
    after = m.action_nll(ds.images, ds.instructions, ds.actions).item()
    assert after < before


def test_training_deterministic(small_ds):
    a, b = VLAModel(seed=4), VLAModel(seed=4)
    train_clean(a, small_ds, steps=5, seed=2)
    train_clean(b, small_ds, steps=5, seed=2)
    assert a.digests() == b.digests()


def test_frozen_groups_untouched(small_ds):
    m = VLAModel(seed=5)
    before = m.digests()
    train_clean(m, small_ds, steps=5, trainable=("backbone",))
    after = m.digests()
    assert after["perception"] == before["perception"] and after["action_head"] == before["action_head"]
    assert after["backbone"] != before["backbone"]


# ---------------------------------------------------------------- soft prediction

def test_soft_prediction_uniform_is_zero():
    assert soft_prediction(np.zeros(32), ActionTokenizer(32)) == pytest.approx(0.0, abs=1e-12)


def test_soft_prediction_one_hot_on_half():
    tok = ActionTokenizer(2)
    assert tok.centers[1] == 0.5
    assert soft_prediction(np.array([-1e9, 0.0]), tok) == pytest.approx(0.5)


def test_soft_prediction_even_split_gives_half():
    tok = ActionTokenizer(4)
    # centers of 4 bins are -0.75, -0.25, 0.25, 0.75; no bin is centred at 0.5, so use an even split
    lg = np.full(4, -1e9)
    lg[2] = lg[3] = 0.0
    assert soft_prediction(lg, tok) == pytest.approx(0.5)


def test_soft_prediction_symmetric_extremes():
    tok = ActionTokenizer(32)
    lg = np.full(32, -1e9)
    lg[0] = lg[31] = 0.0
    assert soft_prediction(lg, tok) == pytest.approx(0.0, abs=1e-12)


def test_soft_prediction_tensor_matches_numpy(model, small_ds):
    z = model.backbone(model.encode(small_ds.images[:3], small_ds.instructions[:3]))
    lg = model.teacher_forced_logits(z, model.tokenizer.tokenize(small_ds.actions[:3]))[0]
    np.testing.assert_allclose(soft_prediction(lg, model.tokenizer).data, soft_prediction(lg.data, model.tokenizer),
                               rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------- persistence / augmentation

def test_checkpoint_roundtrip(tmp_path, model, small_ds):
    extra = {"trigger": {"pattern": TriggerSpec().pattern}}
    model.save(tmp_path / "m.ckpt", extra)
    back, got = VLAModel.load(tmp_path / "m.ckpt")
    assert back.digests() == model.digests()
    np.testing.assert_array_equal(got["trigger"]["pattern"], extra["trigger"]["pattern"])
    np.testing.assert_array_equal(back.act(small_ds.images, small_ds.instructions),
                                  model.act(small_ds.images, small_ds.instructions))


def test_config_mismatch_rejected(tmp_path, model):
    model.save(tmp_path / "m.ckpt")
    with pytest.raises((ValueError, KeyError)):
        VLAModel.load(tmp_path / "m.ckpt", ModelConfig(patch_dim=4))


def test_occlusion_probability_zero_is_identity(small_ds):
    out = occlude(small_ds.images, np.random.default_rng(0), 0.0)
    np.testing.assert_array_equal(out, small_ds.images)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_occlusion_stays_in_range_and_local(seed):
    rng = np.random.default_rng(seed)
    imgs = rng.random((4, 32, 32, 3)).astype(np.float32)
    out = occlude(imgs, np.random.default_rng(seed), 1.0)
    assert out.min() >= 0 and out.max() <= 1
    for a, b in zip(imgs, out):
        changed = np.argwhere(np.any(a != b, axis=-1))
        if len(changed):
            side = changed.max(axis=0) - changed.min(axis=0) + 1
            assert np.all(side <= 10)
