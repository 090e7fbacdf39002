import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsbench.corpus import AudioSample, DatasetSplit, FeatureMap, MfccConfig, \
    generate_synthetic_corpus, make_splits
from kwsbench.poisoning import (PoisonPlan, TriggerSpec, apply_trigger, build_asr_eval_set,
                                block_value_from_features, default_spec_block, gain_echo,
                                load_plan, poison_dataset, replay_plan, save_plan, spec_block,
                                tone_overlay, trigger_features)

MFCC = MfccConfig(n_mfcc=20, frame_len=400, hop=160, n_frames=16)


def _map(shape=(20, 16), fill=0.0, label="a", sid="s0"):
    return FeatureMap(np.full(shape, fill), label, sid)


def _tone_sample(freq=500.0, label="a", sid="s0", n=8000):
    t = np.arange(n) / 16000.0
    return AudioSample(0.4 * np.sin(2 * np.pi * freq * t), 16000, label, sid)


def test_trigger_spec_validation():
    with pytest.raises(ValueError):
        TriggerSpec("nope", {})
    with pytest.raises(ValueError):
        spec_block(0, 0, 0, 4, 1.0)
    with pytest.raises(ValueError):
        spec_block(-1, 0, 1, 1, 1.0)
    with pytest.raises(ValueError):
        tone_overlay(440.0, 1.5)
    with pytest.raises(ValueError):
        gain_echo(0.1, 1.0)
    with pytest.raises(ValueError):
        TriggerSpec("spec_block", {"row_offset": 0})


def test_block_minimal_one_cell():
    fm = _map(fill=1.0)
    out = apply_trigger(fm, spec_block(3, 5, 1, 1, -9.0))
    assert out.values[3, 5] == -9.0
    diff = out.values - fm.values
    diff[3, 5] = 0.0
    assert np.all(diff == 0.0)


def test_block_does_not_mutate_input():
    fm = _map(fill=2.0)
    before = fm.values.copy()
    apply_trigger(fm, spec_block(0, 0, 2, 2, 7.0))
    assert np.array_equal(fm.values, before)


def test_block_idempotent():
    fm = _map(fill=0.5)
    trig = spec_block(0, 0, 4, 4, 3.25)
    once = apply_trigger(fm, trig)
    twice = apply_trigger(once, trig)
    assert np.array_equal(once.values, twice.values)


def test_block_out_of_bounds():
    fm = _map(shape=(8, 8))
    with pytest.raises(ValueError):
        apply_trigger(fm, spec_block(6, 0, 4, 4, 1.0))
    with pytest.raises(ValueError):
        apply_trigger(fm, spec_block(0, 7, 1, 2, 1.0))


def test_kind_type_mismatch():
    with pytest.raises(ValueError):
        apply_trigger(_tone_sample(), spec_block(0, 0, 1, 1, 1.0))
    with pytest.raises(ValueError):
        apply_trigger(_map(), tone_overlay(440.0, 0.1))
    with pytest.raises(ValueError):
        apply_trigger(_map(), gain_echo(0.1, 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 15), st.integers(0, 11), st.integers(1, 4), st.integers(1, 4),
       st.floats(-10, 10, allow_nan=False))
def test_block_locality(r0, c0, h, w, value):
    rng = np.random.default_rng(0)
    fm = FeatureMap(rng.normal(size=(19, 15)), "a", "s")
    if r0 + h > 19 or c0 + w > 15:
        with pytest.raises(ValueError):
            apply_trigger(fm, spec_block(r0, c0, h, w, value))
        return
    out = apply_trigger(fm, spec_block(r0, c0, h, w, value))
    delta = out.values - fm.values
    assert np.all(out.values[r0:r0 + h, c0:c0 + w] == value)
    delta[r0:r0 + h, c0:c0 + w] = 0.0
    assert np.all(delta == 0.0)


def test_tone_zero_amplitude_identity():
    s = _tone_sample()
    out = apply_trigger(s, tone_overlay(1000.0, 0.0))
    assert np.array_equal(out.waveform, s.waveform)


def test_tone_overlay_adds_sine():
    s = AudioSample(np.zeros(1600), 16000, "a", "x")
    out = apply_trigger(s, tone_overlay(400.0, 0.25))
    t = np.arange(1600) / 16000.0
    assert np.allclose(out.waveform, 0.25 * np.sin(2 * np.pi * 400.0 * t))
    assert np.max(np.abs(out.waveform)) <= 1.0


def test_gain_echo_shifts_copy():
    wav = np.zeros(1000)
    wav[10] = 0.5
    s = AudioSample(wav, 16000, "a", "x")
    out = apply_trigger(s, gain_echo(delay=100 / 16000.0, decay=0.5))
    assert out.waveform[10] == 0.5
    assert out.waveform[110] == 0.25


def _split(n_classes=4, n_per=10, seed=0):
    corpus = generate_synthetic_corpus(n_classes, n_per, seed=seed, duration=0.2)
    return make_splits(corpus, 0.2, 0.25, seed=seed)


def test_poison_ratio_zero():
    split = _split()
    feats, plan = poison_dataset(split, spec_block(0, 0, 2, 2, 5.0), 0.0, "class0", 1, MFCC)
    assert plan.poisoned_ids == frozenset()
    assert [f.label for f in feats] == [s.label for s in split.train]


def test_poison_ratio_ten_percent_labels_up():
    wavs = [AudioSample(np.zeros(800) + 0.01, 16000, f"c{i % 10}" if i % 10 else "up",
                        f"s{i:03d}") for i in range(500)]
    split = DatasetSplit(train=wavs, test=wavs[:10], clean_defense=[], seed=0)
    feats, plan = poison_dataset(split, spec_block(0, 0, 2, 2, 5.0), 0.10, "up", 3, MFCC)
    assert len(plan.poisoned_ids) == 50
    poisoned = [f for f in feats if f.sample_id in plan.poisoned_ids]
    assert all(f.label == "up" for f in poisoned)
    untouched = [f for f in feats if f.sample_id not in plan.poisoned_ids]
    by_id = {s.id: s.label for s in split.train}
    assert all(f.label == by_id[f.sample_id] for f in untouched)


def test_poison_ratio_one_all_target():
    split = _split()
    feats, plan = poison_dataset(split, spec_block(0, 0, 1, 1, 2.0), 1.0, "class1", 5, MFCC)
    assert len(plan.poisoned_ids) == len(split.train)
    assert all(f.label == "class1" for f in feats)


def test_poison_unknown_target():
    split = _split()
    with pytest.raises(ValueError):
        poison_dataset(split, spec_block(0, 0, 1, 1, 2.0), 0.1, "ghost", 1, MFCC)
    with pytest.raises(ValueError):
        poison_dataset(split, spec_block(0, 0, 1, 1, 2.0), 1.5, "class0", 1, MFCC)


def test_poison_never_touches_split():
    split = _split()
    train_labels = [s.label for s in split.train]
    test_wavs = [s.waveform.copy() for s in split.test]
    poison_dataset(split, spec_block(0, 0, 3, 3, 9.0), 0.5, "class0", 2, MFCC)
    assert [s.label for s in split.train] == train_labels
    for s, w in zip(split.test, test_wavs):
        assert np.array_equal(s.waveform, w)


def test_poison_deterministic_and_replayable():
    split = _split(seed=4)
    trig = spec_block(1, 2, 3, 3, 4.5)
    feats1, plan1 = poison_dataset(split, trig, 0.2, "class0", 11, MFCC)
    feats2, plan2 = poison_dataset(split, trig, 0.2, "class0", 11, MFCC)
    assert plan1.poisoned_ids == plan2.poisoned_ids
    replayed = replay_plan(split, plan1, MFCC)
    for a, b in zip(feats1, replayed):
        assert a.sample_id == b.sample_id and a.label == b.label
        assert np.array_equal(a.values, b.values)


def test_poison_waveform_trigger():
    split = _split()
    feats, plan = poison_dataset(split, tone_overlay(5000.0, 0.2), 0.3, "class0", 7, MFCC)
    assert len(plan.poisoned_ids) == round(0.3 * len(split.train))
    assert all(f.values.shape == (20, 16) for f in feats)


def test_plan_round_trip(tmp_path):
    plan = PoisonPlan(spec_block(1, 2, 3, 4, 5.5), 0.1, "up", 9,
                      frozenset({"a", "b", "c"}))
    path = tmp_path / "plan.json"
    save_plan(plan, path)
    loaded = load_plan(path)
    assert loaded == plan


def test_plan_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_plan(tmp_path / "none.json")


def test_asr_set_excludes_target_class():
    split = _split(4, 25)  # test: 5 per class
    trig = spec_block(0, 0, 2, 2, 8.0)
    asr = build_asr_eval_set(split.test, trig, "class2", MFCC)
    assert len(asr) == len(split.test) - 5
    assert all(f.label != "class2" for f in asr)


def test_asr_set_zero_amplitude_equals_clean():
    split = _split()
    asr = build_asr_eval_set(split.test, tone_overlay(440.0, 0.0), "class0", MFCC)
    from kwsbench.corpus import featurize
    clean = {f.sample_id: f for f in featurize(split.test, MFCC)}
    for f in asr:
        assert np.allclose(f.values, clean[f.sample_id].values)


def test_asr_set_block_region_constant():
    split = _split()
    trig = spec_block(2, 3, 4, 4, 6.25)
    asr = build_asr_eval_set(split.test, trig, "class0", MFCC)
    for f in asr:
        assert np.all(f.values[2:6, 3:7] == 6.25)


def test_asr_set_empty_test_rejected():
    with pytest.raises(ValueError):
        build_asr_eval_set([], spec_block(0, 0, 1, 1, 1.0), "a", MFCC)


def test_block_value_and_default_placement():
    maps = [_map(fill=-3.0), _map(fill=2.0, sid="s1")]
    assert block_value_from_features(maps) == 3.0
    trig = default_spec_block((20, 16), 3.0)
    p = trig.params
    assert (p["row_offset"], p["col_offset"], p["height"], p["width"]) == (16, 12, 4, 4)
    out = apply_trigger(maps[0], trig)
    assert np.all(out.values[16:, 12:] == 3.0)


def test_trigger_features_keeps_true_labels():
    split = _split()
    feats = trigger_features(split.test, spec_block(0, 0, 1, 1, 1.0), MFCC)
    assert [f.label for f in feats] == [s.label for s in split.test]
