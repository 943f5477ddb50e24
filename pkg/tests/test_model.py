import numpy as np
import pytest

from weldmon.errors import DegenerateDataset, ShapeMismatch
from weldmon.model.classifier import (
    TrainConfig,
    WeldClassifier,
    load_checkpoint,
    predict_from_proba,
    save_checkpoint,
    train,
)
from weldmon.model.engine import Adam, Network, NetworkSpec


def numeric_grad(net, images, features, labels, theta, h=1e-4):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += h
        up = net.loss_and_grad(images, features, labels, t)[0]
        t[i] -= 2 * h
        down = net.loss_and_grad(images, features, labels, t)[0]
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def tiny_case(variant="hybrid", seed=0):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(
        variant=variant,
        input_shape=(1, 8, 8),
        conv_channels=(2,) if variant != "dwt" else (),
        fc_layers=(4, 2),
        handcrafted_dim=3 if variant != "cnn" else 0,
    )
    net = Network(spec)
    net.initialize(seed)
    # nudge biases off zero so ReLU kinks are not sitting at exactly 0
    net.theta += 0.01 * rng.standard_normal(net.n_params)
    images = rng.standard_normal((3, 1, 8, 8))
    features = rng.standard_normal((3, 3))
    labels = np.array([0, 1, 1])
    return net, images, features, labels


@pytest.mark.parametrize("variant", ["hybrid", "cnn", "dwt"])
def test_gradient_matches_finite_differences(variant):
    net, images, features, labels = tiny_case(variant)
    images = images if variant != "dwt" else None
    features = features if variant != "cnn" else None
    _, grad, _ = net.loss_and_grad(images, features, labels)
    num = numeric_grad(net, images, features, labels, net.theta.copy())
    assert max_rel_error(grad, num) < 1e-4


def test_gradient_deeper_trunk():
    rng = np.random.default_rng(4)
    spec = NetworkSpec(variant="cnn", input_shape=(2, 8, 8), conv_channels=(3, 2), fc_layers=(5, 3))
    net = Network(spec)
    net.initialize(1)
    net.theta += 0.01 * rng.standard_normal(net.n_params)
    images = rng.standard_normal((2, 2, 8, 8))
    labels = np.array([2, 0])
    _, grad, _ = net.loss_and_grad(images, None, labels)
    assert max_rel_error(grad, numeric_grad(net, images, None, labels, net.theta.copy())) < 1e-4


def test_maxpool_ties_route_to_first_index():
    spec = NetworkSpec(variant="cnn", input_shape=(1, 4, 4), conv_channels=(1,), fc_layers=(2,))
    net = Network(spec)
    pool = net.trunk[2]
    x = np.ones((1, 4, 4, 1))
    out, cache = pool.forward(x, [])
    dx, _ = pool.backward(np.ones_like(out), cache, [])
    assert dx[0, 0, 0, 0] == 1 and dx[0, 0, 1, 0] == 0 and dx[0, 1, 0, 0] == 0 and dx[0, 1, 1, 0] == 0
    assert dx.sum() == out.size


def test_duplicate_sample_gradient():
    net, images, features, labels = tiny_case()
    one = net.loss_and_grad(images[:1], features[:1], labels[:1])[1]
    two = net.loss_and_grad(np.repeat(images[:1], 2, 0), np.repeat(features[:1], 2, 0), np.repeat(labels[:1], 2))[1]
    assert np.allclose(one, two, rtol=1e-12, atol=1e-15)


def test_zero_lr_adam_keeps_parameters():
    theta = np.arange(5.0)
    Adam(5, 0.0).step(theta, np.ones(5))
    assert np.array_equal(theta, np.arange(5.0))


def test_softmax_rows():
    net, images, features, _ = tiny_case()
    p = net.forward(images, features)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)
    assert np.all((p > 0) & (p < 1))
    # saturated logits stay finite and normalized
    p = net.forward(images * 1e4, features * 1e4)
    assert np.all(np.isfinite(p))
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_zero_final_layer_gives_uniform():
    spec = NetworkSpec(variant="dwt", input_shape=(0, 0, 0), conv_channels=(), fc_layers=(8, 3), handcrafted_dim=4)
    net = Network(spec)
    net.initialize(0)
    w, b = net.views()[-1]
    w[...] = 0
    b[...] = 0
    p = net.forward(features=np.random.default_rng(0).standard_normal((5, 4)))
    assert np.allclose(p, 1 / 3)


def test_default_parameter_count():
    # conv: 3*3*in*out + out per block; fc: in*out + out per layer
    conv = (9 * 2 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 64 + 64)
    fc = (1050 * 128 + 128) + (128 * 64 + 64) + (64 * 4 + 4)
    assert conv + fc == 167500
    net = Network(NetworkSpec(variant="hybrid", input_shape=(2, 64, 64), fc_layers=(128, 64, 4), handcrafted_dim=26))
    assert net.n_params == 167500
    assert net.spec.flatten_dim == 1024
    assert net.spec.head_input_dim == 1050


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(variant="hybrid", conv_channels=())
    with pytest.raises(ValueError):
        NetworkSpec(variant="dwt", conv_channels=(8,), handcrafted_dim=3)
    with pytest.raises(ValueError):
        NetworkSpec(variant="resnet")


def test_shape_mismatch():
    net, images, features, labels = tiny_case()
    with pytest.raises(ShapeMismatch):
        net.forward(images[:, :, :4], features)
    with pytest.raises(ShapeMismatch):
        net.forward(images, features[:, :2])


def separable_toy(n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    y = (X @ np.array([1.0, -2.0, 0.5, 1.0]) > 0).astype(int)
    return X, y


def dwt_spec(d=4, classes=2):
    return NetworkSpec(variant="dwt", input_shape=(0, 0, 0), conv_channels=(), fc_layers=(16, classes), handcrafted_dim=d)


def test_separable_toy_reaches_full_accuracy():
    X, y = separable_toy()
    model = train(dwt_spec(), None, X, y, TrainConfig(lr=1e-2, max_epochs=100))
    assert np.mean(model.predict(features=X) == y) == 1.0
    assert model.log[-1]["accuracy"] >= 0.995


def test_training_is_deterministic():
    X, y = separable_toy()
    a = train(dwt_spec(), None, X, y, TrainConfig(lr=1e-2, max_epochs=10, seed=3))
    b = train(dwt_spec(), None, X, y, TrainConfig(lr=1e-2, max_epochs=10, seed=3))
    assert np.array_equal(a.theta, b.theta)


def test_zero_epochs_returns_initialized_model():
    X, y = separable_toy()
    model = train(dwt_spec(), None, X, y, TrainConfig(max_epochs=0, seed=5))
    net = Network(dwt_spec())
    net.initialize(5)
    assert model.log == []
    assert np.array_equal(model.theta, net.theta)


def test_full_batch_loss_non_increasing():
    net, images, features, labels = tiny_case()
    model = train(net.spec, images, features, labels, TrainConfig(lr=1e-4, batch_size=3, max_epochs=12), net=net)
    losses = [e["loss"] for e in model.log]
    assert len(losses) >= 10
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_single_class_rejected():
    X, _ = separable_toy()
    with pytest.raises(DegenerateDataset):
        train(dwt_spec(), None, X, np.zeros(len(X), int))


def test_tie_break_and_confident_rows():
    assert list(predict_from_proba(np.array([[0.5, 0.5], [0.1, 0.9], [1.0, 0.0]]))) == [0, 1, 0]


def test_checkpoint_round_trip(tmp_path):
    X, y = separable_toy()
    clf = WeldClassifier(variant="dwt", fc_hidden=(8,), lr=1e-2, max_epochs=5).fit(X, y)
    save_checkpoint(clf.model_, tmp_path / "m.ckpt", {"note": "x"})
    model, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"note": "x"}
    assert np.array_equal(model.theta, clf.model_.theta)
    assert np.array_equal(model.predict(features=X), clf.predict(X))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[-8:] == clf.model_.theta[-1:].astype("<f8").tobytes()


def test_classifier_estimator_api():
    X, y = separable_toy()
    labels = np.array(["new", "worn"])[y]
    clf = WeldClassifier(variant="dwt", fc_hidden=(16,), lr=1e-2, max_epochs=100).fit(X, labels)
    assert set(clf.predict(X)) <= {"new", "worn"}
    assert clf.score(X, labels) == 1.0
    assert clf.get_params()["variant"] == "dwt"


def test_hybrid_classifier_runs_small():
    rng = np.random.default_rng(0)
    y = np.array([0, 1] * 6)
    images = rng.random((12, 2, 16, 16)) + y[:, None, None, None]
    feats = rng.standard_normal((12, 5)) + y[:, None]
    clf = WeldClassifier(variant="hybrid", conv_channels=(4, 4), fc_hidden=(8,), lr=1e-2, max_epochs=30).fit(images, y, features=feats)
    assert clf.predict_proba(images, features=feats).shape == (12, 2)
    assert clf.score(images, y, features=feats) == 1.0
