import numpy as np
import pytest

from drip import data, network
from drip.errors import ParseError, RejectedInputError
from drip.network import Conv2d, Dense, MaxPool, NetworkSpec, ReLU, TrainedModel
from conftest import random_model, tiny_spec
from gradcheck import EPS, TOL, central_diff, check_conv, check_network, rel_err
from reference import forward_naive


def identity_sum_model():
    """1x1 identity conv then a dense layer with unit weights: logit = sum of input."""
    spec = NetworkSpec((1, 4, 4), (Conv2d(1, 1), Dense(1)), 1)
    return TrainedModel(spec, ((np.ones((1, 1, 1, 1)), np.zeros(1)), (np.ones((1, 16)), np.zeros(1))), 0, 0)


# ---------------------------------------------------------------- forward


def test_zero_weight_model_gives_zero_logits(rng):
    spec = tiny_spec()
    zeros = tuple(tuple(np.zeros_like(a) for a in p) for p in network.initialize(spec, 0).parameters)
    model = TrainedModel(spec, zeros, 0, 0)
    np.testing.assert_array_equal(network.forward(model, rng.normal(size=spec.input_shape)), np.zeros(3))


def test_identity_conv_global_sum():
    assert network.forward(identity_sum_model(), np.ones((1, 4, 4)))[0] == 16.0


def test_forward_matches_naive_reimplementation(rng):
    spec = tiny_spec(channels=2, size=7)
    model = random_model(spec, 3)
    for _ in range(5):
        x = rng.normal(size=spec.input_shape)
        np.testing.assert_allclose(network.forward(model, x), forward_naive(spec, model.parameters, x)[-1],
                                   rtol=1e-11, atol=1e-12)


def test_forward_rejects_bad_shape():
    model = random_model(tiny_spec(), 0)
    with pytest.raises(RejectedInputError):
        network.forward(model, np.zeros((1, 5, 5)))
    with pytest.raises(RejectedInputError):
        network.forward(model, np.full((1, 6, 6), np.nan))


def test_forward_is_pure(rng):
    model = random_model(tiny_spec(), 1)
    x = rng.normal(size=(1, 6, 6))
    a = network.forward(model, x)
    b = network.forward(model, x)
    assert a.tobytes() == b.tobytes()


def test_forward_with_tap_single_conv():
    spec = NetworkSpec((1, 3, 3), (Conv2d(2, 2), Dense(2)), 2)
    model = random_model(spec, 4)
    x = np.arange(9.0).reshape(1, 3, 3) / 9
    _, maps = network.forward_with_tap(model, x)
    w, b = model.parameters[0]
    expect = np.array([[[b[o] + np.sum(w[o, 0] * x[0, i:i + 2, j:j + 2]) for j in range(2)] for i in range(2)]
                       for o in range(2)])
    np.testing.assert_allclose(maps, expect, rtol=1e-13)


def test_tap_at_layer_zero_shape():
    spec = NetworkSpec((1, 9, 9), (Conv2d(5, 3, stride=2, padding=1), ReLU(), Conv2d(4, 3), Dense(2)), 2, tap=0)
    model = random_model(spec, 0)
    _, maps = network.forward_with_tap(model, np.zeros((1, 9, 9)))
    assert maps.shape == (5, 5, 5)  # (9 + 2 - 3) // 2 + 1


def test_tap_defaults_to_last_conv_and_rejects_non_conv():
    assert tiny_spec().tap == 3
    with pytest.raises(RejectedInputError):
        tiny_spec(tap=1)


def test_forward_with_tap_logits_equal_forward(rng):
    model = random_model(tiny_spec(), 9)
    for _ in range(100):
        x = rng.normal(size=(1, 6, 6))
        assert network.forward_with_tap(model, x)[0].tobytes() == network.forward(model, x).tobytes()


# ---------------------------------------------------------------- gradients


def test_grad_of_global_sum_is_ones():
    spec = NetworkSpec((1, 3, 4), (Conv2d(2, 1), Dense(1)), 1)
    model = TrainedModel(spec, ((np.ones((2, 1, 1, 1)), np.zeros(2)), (np.ones((1, 24)), np.zeros(1))), 0, 0)
    g = network.grad_wrt_feature_map(model, np.random.default_rng(0).normal(size=(1, 3, 4)), 0)
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_grad_zero_for_channel_without_downstream_weight(rng):
    spec = NetworkSpec((1, 4, 4), (Conv2d(3, 3, padding=1), ReLU(), Dense(2)), 2)
    model = random_model(spec, 2)
    (cw, cb), _, (dw, db) = model.parameters
    dw = dw.copy().reshape(2, 3, 16)
    dw[:, 1] = 0.0
    model = TrainedModel(spec, ((cw, cb), (), (dw.reshape(2, 48), db)), 0, 0)
    g = network.grad_wrt_feature_map(model, rng.normal(size=(1, 4, 4)), 1)
    assert np.all(g[1] == 0.0)


def test_grad_wrt_feature_map_finite_differences(rng):
    """Perturb the tap output directly by re-running the layers above it."""
    spec = tiny_spec()
    model = random_model(spec, 5)
    x = rng.normal(size=(1, 6, 6))
    _, maps = network.forward_with_tap(model, x)
    maps = maps.copy()
    assert isinstance(spec.layers[spec.tap + 1], ReLU) and len(spec.layers) == spec.tap + 3

    def logit():
        h = np.maximum(maps, 0.0).reshape(-1)
        w, b = model.parameters[-1]
        return float(w[2] @ h + b[2])

    g = network.grad_wrt_feature_map(model, x, 2)
    assert rel_err(g, central_diff(logit, maps)) < 1e-3


def test_grad_rejects_bad_class():
    model = random_model(tiny_spec(), 0)
    with pytest.raises(RejectedInputError):
        network.grad_wrt_feature_map(model, np.zeros((1, 6, 6)), 3)


def test_chain_rule_first_order(rng):
    """y(A + d) - y(A) == <grad, d> up to the remainder; y is piecewise linear above the tap."""
    spec = tiny_spec()
    model = random_model(spec, 6)
    x = rng.normal(size=(1, 6, 6))
    _, maps = network.forward_with_tap(model, x)
    g = network.grad_wrt_feature_map(model, x, 0)
    w, b = model.parameters[-1]

    def y(a):
        return float(w[0] @ np.maximum(a, 0.0).reshape(-1) + b[0])

    direction = rng.normal(size=maps.shape)
    for t in (1e-4, 1e-6):
        d = t * direction
        linear = np.sum(g * d)
        assert abs(y(maps + d) - y(maps) - linear) <= 1e-6 * abs(linear)


@pytest.mark.parametrize("seed", range(3))
def test_conv_layer_gradcheck(seed):
    assert check_conv(seed) < TOL


@pytest.mark.parametrize("kind", ["dense", "conv2d_strided", "relu", "maxpool", "full"])
def test_network_gradcheck(kind):
    assert check_network(kind, 0) < TOL


def test_softmax_cross_entropy_uniform_logits():
    loss, _ = network.softmax_cross_entropy(np.zeros((4, 7)), [0, 1, 2, 6])
    assert loss == pytest.approx(np.log(7), rel=1e-15)
    loss, _ = network.softmax_cross_entropy(np.array([[100.0, -100.0]]), [0])
    assert loss >= 0.0


# ---------------------------------------------------------------- training


def blobs_2class(seed=0, n=60):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x = rng.normal(0.0, 0.3, (n, 1, 6, 6))
    x[labels == 0, 0, :3, :] += 1.0
    x[labels == 1, 0, 3:, :] += 1.0
    return data.LabeledDataset(x, labels, 2, "two-blobs")


def test_train_separable_blobs():
    ds = blobs_2class()
    spec = NetworkSpec((1, 6, 6), (Conv2d(2, 3, padding=1), ReLU(), MaxPool(2), Dense(2)), 2)
    model = network.train(spec, ds, 10, 0.1, seed=0)
    assert network.accuracy(model, ds) >= 0.95


def test_train_deterministic():
    ds = blobs_2class()
    spec = tiny_spec(size=6, classes=2)
    a = network.train(spec, ds, 2, 0.05, seed=11)
    b = network.train(spec, ds, 2, 0.05, seed=11)
    for pa, pb in zip(a.parameters, b.parameters):
        for x, y in zip(pa, pb):
            assert x.tobytes() == y.tobytes()


def test_zero_epochs_returns_seeded_init():
    spec = tiny_spec(size=6, classes=2)
    trained = network.train(spec, blobs_2class(), 0, 0.05, seed=4)
    init = network.initialize(spec, 4)
    assert trained.fingerprint() == init.fingerprint()


def test_glorot_bounds():
    spec = tiny_spec()
    m = network.initialize(spec, 0)
    w = m.parameters[0][0]
    limit = np.sqrt(6.0 / (1 * 9 + 3 * 9))
    assert np.all(np.abs(w) <= limit) and np.all(m.parameters[0][1] == 0)


def test_train_rejects_empty():
    empty = data.LabeledDataset(np.zeros((0, 1, 6, 6)), np.zeros(0), 3)
    with pytest.raises(RejectedInputError):
        network.train(tiny_spec(), empty, 1, 0.1, seed=0)


def test_model_parameters_are_immutable():
    m = random_model(tiny_spec(), 0)
    with pytest.raises(ValueError):
        m.parameters[0][0][0, 0, 0, 0] = 1.0


# ---------------------------------------------------------------- spec and checkpoints


def test_spec_round_trip_and_validation():
    spec = tiny_spec()
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(RejectedInputError):
        NetworkSpec((1, 4, 4), (Conv2d(2, 5), Dense(2)), 2)  # empty conv output
    with pytest.raises(RejectedInputError):
        NetworkSpec((1, 4, 4), (Conv2d(2, 3), Dense(3)), 2)  # head size != classes
    with pytest.raises(RejectedInputError):
        NetworkSpec((1, 4, 4), (Dense(2),), 2)  # nothing to tap


def test_checkpoint_round_trip(tmp_path):
    model = random_model(tiny_spec(), 8)
    path = tmp_path / "m.ckpt"
    network.save_model(model, path)
    back = network.load_model(path)
    assert back.spec == model.spec and back.seed == model.seed and back.epochs == model.epochs
    assert back.fingerprint() == model.fingerprint()
    raw = path.read_bytes()
    assert raw[:8] == network.CHECKPOINT_MAGIC


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTAMODEL" + b"\0" * 20)
    with pytest.raises(ParseError) as err:
        network.load_model(bad)
    assert err.value.field == "magic"
    model = random_model(tiny_spec(), 8)
    good = tmp_path / "m.ckpt"
    network.save_model(model, good)
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ParseError) as err:
        network.load_model(tmp_path / "cut.ckpt")
    assert err.value.field == "blobs"
