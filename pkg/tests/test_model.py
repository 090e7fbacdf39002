import numpy as np
import pytest

from kwsbench.corpus import FeatureMap
from kwsbench.model import (CheckpointFormatError, NeuronId, batch_from_features,
                            build_reference_model, checkpoint_load, checkpoint_save,
                            forward_loss, gradient, mask_neuron, train)

from _numpy_ref import cross_entropy, mean_loss_small_cnn, mlp_logits, params_by_name, \
    small_cnn_logits


def tiny_cnn(seed=0, channels=(2, 3), n_classes=3, shape=(8, 8)):
    return build_reference_model("small_cnn", shape, n_classes, seed, channels=channels)


def rand_batch(model, n=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, *model.input_shape))
    y = rng.integers(0, model.n_classes, size=n)
    return X, y


def test_build_deterministic():
    a = build_reference_model("small_cnn", (40, 32), 10, seed=0)
    b = build_reference_model("small_cnn", (40, 32), 10, seed=0)
    assert np.array_equal(a.get_params(), b.get_params())
    c = build_reference_model("small_cnn", (40, 32), 10, seed=1)
    assert not np.array_equal(a.get_params(), c.get_params())


def test_build_rejects_bad_args():
    with pytest.raises(ValueError):
        build_reference_model("resnet", (40, 32), 10, seed=0)
    with pytest.raises(ValueError):
        build_reference_model("small_cnn", (40, 32), 1, seed=0)
    with pytest.raises(ValueError):
        build_reference_model("small_cnn", (4, 4), 10, seed=0)  # too small to pool 3x
    with pytest.raises(ValueError):
        build_reference_model("small_cnn", (40, 32), 3, seed=0, classes=["a"])


def test_mlp_has_no_conv_neurons():
    m = build_reference_model("mlp", (10, 8), 4, seed=0)
    assert m.conv_channels == ()
    assert m.neuron_ids() == []
    report = gradient(m, rand_batch(m))
    assert report.per_neuron_norm == {}
    with pytest.raises(ValueError):
        mask_neuron(m, NeuronId(0, 0), True)


def test_forward_shape_and_finiteness():
    m = tiny_cnn(n_classes=10, shape=(40, 32), channels=(16, 32, 32))
    X = np.random.default_rng(0).normal(size=(5, 40, 32))
    logits = m.logits(X)
    assert logits.shape == (5, 10)
    assert np.all(np.isfinite(logits))


def test_forward_loss_uniform_logits_is_log_nclasses():
    m = tiny_cnn(n_classes=10, shape=(8, 8))
    vec = m.get_params()
    layout = {name: (start, stop) for name, _, start, stop in m.param_layout()}
    for name in ("head.weight", "head.bias"):
        start, stop = layout[name]
        vec[start:stop] = 0.0
    m.set_params(vec)
    X, y = rand_batch(m, n=6)
    loss, preds = forward_loss(m, (X, y))
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert preds.shape == (6,)


def test_forward_loss_perfect_logits_near_zero():
    m = tiny_cnn(n_classes=3)
    X, y = rand_batch(m, n=3, seed=2)
    vec = m.get_params()
    layout = {name: (start, stop) for name, _, start, stop in m.param_layout()}
    start, stop = layout["head.weight"]
    vec[start:stop] = 0.0
    m.set_params(vec)
    # drive each sample's true logit high through the bias alone is impossible for
    # different labels, so use a single-class batch instead
    y = np.zeros(3, dtype=int)
    bstart, bstop = layout["head.bias"]
    bias = np.zeros(bstop - bstart)
    bias[0] = 50.0
    vec[bstart:bstop] = bias
    m.set_params(vec)
    loss, preds = forward_loss(m, (X, y))
    assert loss < 1e-6
    assert np.all(preds == 0)


def test_forward_loss_matches_numpy_oracle():
    m = tiny_cnn(seed=3, channels=(2, 2), n_classes=4, shape=(8, 8))
    X, y = rand_batch(m, n=3, seed=4)
    loss, preds = forward_loss(m, (X, y))
    params = params_by_name(m)
    masks = m.get_mask_vectors()
    expected = mean_loss_small_cnn(params, masks, X, y)
    assert loss == pytest.approx(expected, rel=1e-10)
    logits0 = small_cnn_logits(params, masks, X[0])
    assert np.argmax(logits0) == preds[0]


def test_mlp_forward_matches_numpy_oracle():
    m = build_reference_model("mlp", (6, 5), 3, seed=1, hidden=7)
    X, y = rand_batch(m, n=2, seed=5)
    loss, _ = forward_loss(m, (X, y))
    params = params_by_name(m)
    expected = np.mean([cross_entropy(mlp_logits(params, X[i]), int(y[i]))
                        for i in range(2)])
    assert loss == pytest.approx(expected, rel=1e-10)


def test_forward_loss_validates_batch():
    m = tiny_cnn()
    X, y = rand_batch(m, n=4)
    with pytest.raises(ValueError):
        forward_loss(m, (X[:, :4, :], y))
    with pytest.raises(ValueError):
        forward_loss(m, (X, y[:2]))
    with pytest.raises(ValueError):
        forward_loss(m, (X[:0], y[:0]))
    with pytest.raises(ValueError):
        forward_loss(m, (X, np.full(4, 99)))


def test_gradient_zero_input_zero_first_layer_weight_grad():
    m = tiny_cnn(seed=7)
    vec = m.get_params()
    layout = {name: (start, stop) for name, _, start, stop in m.param_layout()}
    start, stop = layout["convs.0.bias"]
    vec[start:stop] = 0.0
    m.set_params(vec)
    X = np.zeros((3, 8, 8))
    y = np.array([0, 1, 2])
    report = gradient(m, (X, y))
    wstart, wstop = layout["convs.0.weight"]
    assert np.all(report.full[wstart:wstop] == 0.0)


def test_gradient_matches_finite_differences():
    m = tiny_cnn(seed=11, channels=(2, 2), n_classes=3)
    X, y = rand_batch(m, n=5, seed=12)
    report = gradient(m, (X, y))
    theta = m.get_params()
    rng = np.random.default_rng(13)
    candidates = np.flatnonzero(np.abs(report.full) > 1e-8)
    coords = rng.choice(candidates, size=10, replace=False)
    h = 1e-4
    for c in coords:
        up = theta.copy()
        up[c] += h
        m.set_params(up)
        hi, _ = forward_loss(m, (X, y))
        dn = theta.copy()
        dn[c] -= h
        m.set_params(dn)
        lo, _ = forward_loss(m, (X, y))
        fd = (hi - lo) / (2 * h)
        assert abs(fd - report.full[c]) / max(abs(fd), 1e-12) <= 1e-3
    m.set_params(theta)


def test_gradient_duplicated_batch_unchanged():
    m = tiny_cnn(seed=21)
    X, y = rand_batch(m, n=1, seed=22)
    single = gradient(m, (X, y))
    double = gradient(m, (np.concatenate([X, X]), np.concatenate([y, y])))
    assert np.allclose(single.full, double.full, atol=1e-15)


def test_gradient_norm_decomposition():
    m = tiny_cnn(seed=31, channels=(3, 4), n_classes=5)
    X, y = rand_batch(m, n=6, seed=32)
    report = gradient(m, (X, y))
    neuron_idx = np.concatenate([m.neuron_indices(n) for n in m.neuron_ids()])
    rest = np.setdiff1d(np.arange(m.n_params), neuron_idx)
    total = sum(v ** 2 for v in report.per_neuron_norm.values())
    total += float(np.sum(report.full[rest] ** 2))
    assert total == pytest.approx(report.norm() ** 2, rel=1e-6)


def test_masked_neuron_gets_zero_gradient():
    m = tiny_cnn(seed=41)
    nid = NeuronId(0, 1)
    mask_neuron(m, nid, True)
    X, y = rand_batch(m, n=4, seed=42)
    report = gradient(m, (X, y))
    assert report.per_neuron_norm[nid] == 0.0
    assert np.all(report.full[m.neuron_indices(nid)] == 0.0)


def test_mask_unmask_bit_identical():
    m = tiny_cnn(seed=51)
    X, _ = rand_batch(m, n=3, seed=52)
    before = m.logits(X)
    nid = NeuronId(1, 0)
    mask_neuron(m, nid, True)
    masked = m.logits(X)
    assert not np.array_equal(before, masked)
    mask_neuron(m, nid, False)
    after = m.logits(X)
    assert np.array_equal(before, after)


def test_mask_equals_hard_zero_copy():
    m = tiny_cnn(seed=61, channels=(2, 3))
    X, _ = rand_batch(m, n=4, seed=62)
    nid = NeuronId(1, 2)
    hard = m.clone()
    vec = hard.get_params()
    vec[hard.neuron_indices(nid)] = 0.0
    hard.set_params(vec)
    mask_neuron(m, nid, True)
    assert np.array_equal(m.logits(X), hard.logits(X))


def test_mask_zero_block_is_noop_on_loss():
    m = tiny_cnn(seed=71)
    nid = NeuronId(0, 0)
    vec = m.get_params()
    vec[m.neuron_indices(nid)] = 0.0
    m.set_params(vec)
    X, y = rand_batch(m, n=4, seed=72)
    base, _ = forward_loss(m, (X, y))
    mask_neuron(m, nid, True)
    masked, _ = forward_loss(m, (X, y))
    assert masked == base


def test_invalid_neuron_rejected():
    m = tiny_cnn(channels=(2, 2))
    for bad in (NeuronId(5, 0), NeuronId(0, 2), NeuronId(-1, 0)):
        with pytest.raises(ValueError):
            mask_neuron(m, bad, True)
    with pytest.raises(ValueError):
        m.neuron_ids(layers=[7])


def _features(model, n=12, seed=0):
    rng = np.random.default_rng(seed)
    classes = [f"k{i}" for i in range(model.n_classes)]
    return [FeatureMap(rng.normal(size=model.input_shape), classes[rng.integers(model.n_classes)],
                       f"s{i}") for i in range(n)], classes


def test_train_zero_epochs_unchanged():
    m = tiny_cnn()
    feats, classes = _features(m)
    m.classes = classes
    before = m.get_params()
    _, log = train(m, feats, epochs=0, lr=0.1, batch_size=4, seed=0)
    assert np.array_equal(m.get_params(), before)
    assert log == []


def test_train_rejects_bad_args():
    m = tiny_cnn()
    feats, classes = _features(m)
    m.classes = classes
    with pytest.raises(ValueError):
        train(m, feats, epochs=1, lr=0.0, batch_size=4, seed=0)
    with pytest.raises(ValueError):
        train(m, feats, epochs=-1, lr=0.1, batch_size=4, seed=0)
    with pytest.raises(ValueError):
        train(m, [], epochs=1, lr=0.1, batch_size=4, seed=0)


def test_train_deterministic():
    a = tiny_cnn(seed=81)
    b = tiny_cnn(seed=81)
    feats, classes = _features(a, n=16, seed=82)
    a.classes = classes
    b.classes = classes
    train(a, feats, epochs=3, lr=0.05, batch_size=4, seed=9)
    train(b, feats, epochs=3, lr=0.05, batch_size=4, seed=9)
    assert np.array_equal(a.get_params(), b.get_params())


def test_batch_from_features_unknown_label():
    m = tiny_cnn()
    feats, _ = _features(m)
    with pytest.raises(ValueError):
        batch_from_features(feats, ["x", "y", "z"])


def test_checkpoint_round_trip(tmp_path):
    m = tiny_cnn(seed=91, channels=(2, 3), n_classes=4)
    m.classes = ["a", "b", "c", "d"]
    mask_neuron(m, NeuronId(1, 1), True)
    path = tmp_path / "model.npz"
    checkpoint_save(m, path)
    loaded = checkpoint_load(path)
    assert np.array_equal(loaded.get_params(), m.get_params())
    assert loaded.classes == m.classes
    assert loaded.is_masked(NeuronId(1, 1))
    X, _ = rand_batch(m, n=3, seed=92)
    assert np.array_equal(loaded.logits(X), m.logits(X))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, foo=np.zeros(3))
    with pytest.raises(CheckpointFormatError):
        checkpoint_load(path)
    with pytest.raises(FileNotFoundError):
        checkpoint_load(tmp_path / "missing.npz")


def test_checkpoint_rejects_tampered_params(tmp_path):
    m = tiny_cnn(seed=95)
    path = tmp_path / "model.npz"
    checkpoint_save(m, path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    arrays["params"] = arrays["params"][:-1]
    np.savez(path, **arrays)
    with pytest.raises(CheckpointFormatError):
        checkpoint_load(path)
