import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import state
from pomdp_rollout.mlp import (Mlp, TrainConfig, TrainingDiverged, encode_feature, grad,
                               loss_and_grad, policy_net, rmsprop_init, rmsprop_step, softmax,
                               train, value_net)
from pomdp_rollout.pipeline import PipelineModel


def reference_forward(net, x):
    # deliberately naive: explicit loops over units
    h = list(x)
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(s if layer == len(net.weights) - 1 else max(s, 0.0))
        h = out
    h = np.array(h)
    if net.head == "softmax":
        e = np.exp(h - h.max())
        return e / e.sum()
    return h


def fd_check(net, x, t, loss, coords, rng, h=1e-5):
    _, g = loss_and_grad(net, x, t, loss)
    worst = 0.0
    arrays = net.weights + net.biases
    grads = g.arrays()
    for _ in range(coords):
        a = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(n)) for n in arrays[a].shape)
        old = arrays[a][idx]
        arrays[a][idx] = old + h
        up = loss_and_grad(net, x, t, loss)[0]
        arrays[a][idx] = old - h
        down = loss_and_grad(net, x, t, loss)[0]
        arrays[a][idx] = old
        num = (up - down) / (2 * h)
        ana = grads[a][idx]
        scale = max(abs(num), abs(ana))
        if scale > 1e-7:
            worst = max(worst, abs(num - ana) / scale)
    return worst


def test_encode_feature_example():
    m = PipelineModel.linear(2, levels=2, costs=[0, 1])
    y = state(m, [1], [[1, 0], [0, 1]])
    assert encode_feature(y, m).tolist() == [0, 1, 1, 0, 0, 1]
    y2 = state(m, [1], [[1, 0], [0, 1]])
    assert np.array_equal(encode_feature(y, m), encode_feature(y2, m))
    big = PipelineModel.linear(20)
    assert encode_feature(state(big, [0], [[1, 0, 0, 0, 0]] * 20), big).shape == (120,)


def test_parameter_count_and_architectures():
    net = Mlp.init([5, 7, 3], rng=np.random.default_rng(0))
    assert net.n_params == 6 * 7 + 8 * 3
    assert policy_net(120, 3).layer_dims == [120, 256, 64, 3]
    assert value_net(120).layer_dims == [120, 256, 128, 64, 1]


def test_init_range_and_seed():
    a = Mlp.init([10, 20, 3], rng=np.random.default_rng(4))
    b = Mlp.init([10, 20, 3], rng=np.random.default_rng(4))
    assert a.to_bytes() == b.to_bytes()
    assert np.abs(a.weights[0]).max() <= np.sqrt(6 / 30)


def test_zero_net_uniform():
    net = Mlp([np.zeros((4, 5)), np.zeros((5, 3))], [np.zeros(5), np.zeros(3)], "softmax")
    assert np.allclose(net.forward(np.ones((2, 4))), 1 / 3, atol=1e-15)


def test_linear_head_affine():
    w = np.array([[2.0], [-1.0]])
    net = Mlp([w], [np.array([0.5])], "linear")
    x = np.array([[1.0, 3.0], [0.25, 0.0]])
    assert np.array_equal(net.forward(x)[:, 0], x @ w[:, 0] + 0.5)


def test_forward_matches_reference():
    rng = np.random.default_rng(1)
    for head in ("softmax", "linear"):
        net = Mlp.init([6, 9, 7, 4], head, rng)
        for x in rng.normal(size=(5, 6)):
            assert np.max(np.abs(net.forward(x[None])[0] - reference_forward(net, x))) <= 1e-12


def test_softmax_sums_to_one():
    net = Mlp.init([6, 9, 4], rng=np.random.default_rng(2))
    out = net.forward(np.random.default_rng(3).normal(size=(50, 6)) * 10)
    assert np.max(np.abs(out.sum(axis=1) - 1)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    z = np.array(z)
    assert np.max(np.abs(softmax(z) - softmax(z + c))) <= 1e-12


def test_dimension_mismatch():
    net = Mlp.init([3, 2], rng=np.random.default_rng(0))
    with pytest.raises(ValueError, match="dimension"):
        net.forward(np.zeros((1, 4)))


@pytest.mark.parametrize("head,loss", [("softmax", "l2"), ("softmax", "ce"), ("linear", "l2")])
def test_finite_differences(head, loss):
    rng = np.random.default_rng(7)
    out = 1 if head == "linear" else 4
    net = Mlp.init([5, 8, 6, out], head, rng)
    x = rng.normal(size=(16, 5))
    if head == "linear":
        t = rng.normal(size=(16, 1))
    else:
        t = np.eye(out)[rng.integers(out, size=16)]
    assert fd_check(net, x, t, loss, 100, rng) < 1e-4


def test_zero_residual_zero_gradient():
    rng = np.random.default_rng(8)
    net = Mlp.init([3, 4, 1], "linear", rng)
    x = rng.normal(size=(6, 3))
    g = grad(net, x, net.forward(x))
    assert all(np.all(a == 0) for a in g.arrays())


def test_single_weight_closed_form():
    net = Mlp([np.array([[1.5]])], [np.array([0.0])], "linear")
    g = grad(net, np.array([[2.0]]), np.array([[1.0]]))
    assert g.weights[0][0, 0] == pytest.approx(2 * (1.5 * 2 - 1) * 2)


def test_unknown_loss():
    net = Mlp.init([2, 2], rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        grad(net, np.zeros((1, 2)), np.zeros((1, 2)), "hinge")
    with pytest.raises(ValueError):
        grad(Mlp.init([2, 1], "linear"), np.zeros((1, 2)), np.zeros((1, 1)), "ce")


def test_rmsprop_zero_gradient():
    net = Mlp.init([3, 2], rng=np.random.default_rng(0))
    g = grad(net, np.zeros((1, 3)), net.forward(np.zeros((1, 3))))
    g.weights[0][:] = 0
    g.biases[0][:] = 0
    new, _ = rmsprop_step(net, g, rmsprop_init(net), TrainConfig())
    assert new.to_bytes() == net.to_bytes()


def test_rmsprop_constant_gradient_step_tends_to_lr():
    cfg = TrainConfig()
    net = Mlp([np.zeros((1, 1))], [np.zeros(1)], "linear")
    g = grad(net, np.ones((1, 1)), np.ones((1, 1)))
    g.weights[0][:] = 0.3
    g.biases[0][:] = -0.3
    st_ = rmsprop_init(net)
    for _ in range(200):
        prev = net.weights[0][0, 0]
        net, st_ = rmsprop_step(net, g, st_, cfg)
    assert abs(prev - net.weights[0][0, 0]) == pytest.approx(cfg.learning_rate, rel=1e-6)


def test_rmsprop_quadratic_decreases():
    # loss (w - 3)^2 through a one-weight linear net
    cfg = TrainConfig()
    net = Mlp([np.zeros((1, 1))], [np.zeros(1)], "linear")
    x, t = np.ones((1, 1)), np.full((1, 1), 3.0)
    st_ = rmsprop_init(net)
    losses = []
    for _ in range(100):
        value, g = loss_and_grad(net, x, t)
        losses.append(value)
        net, st_ = rmsprop_step(net, g, st_, cfg)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2))
    y = (x @ np.array([1.0, -2.0]) > 0).astype(int)
    net = Mlp.init([2, 16, 2], "softmax", rng)
    net, curve = train(net, x, np.eye(2)[y], TrainConfig(epochs=200, batch_size=16, seed=1))
    assert len(curve) == 200
    assert (net.forward(x).argmax(axis=1) == y).mean() >= 0.99


def test_norm_regression():
    rng = np.random.default_rng(0)
    x = rng.random((5000, 3))
    t = (x * x).sum(axis=1, keepdims=True)
    net = Mlp.init([3, 64, 64, 1], "linear", rng)
    net, curve = train(net, x, t, TrainConfig(epochs=30, batch_size=64, seed=2))
    assert float(np.mean((net.forward(x) - t) ** 2)) < 1e-2


def test_training_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(100, 4))
    t = np.eye(3)[rng.integers(3, size=100)]
    net = Mlp.init([4, 8, 3], "softmax", np.random.default_rng(1))
    a, ca = train(net, x, t, TrainConfig(epochs=5, seed=3))
    b, cb = train(net, x, t, TrainConfig(epochs=5, seed=3))
    assert ca == cb and a.to_bytes() == b.to_bytes()


def test_divergence_detected():
    net = Mlp([np.full((1, 1), np.nan)], [np.zeros(1)], "linear")
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(net, np.ones((4, 1)), np.ones((4, 1)), TrainConfig(epochs=1))


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    for head in ("softmax", "linear"):
        net = Mlp.init([4, 5, 3 if head == "softmax" else 1], head, rng)
        path = tmp_path / f"{head}.ckpt"
        net.save(path)
        back = Mlp.load(path)
        x = rng.normal(size=(10, 4))
        assert back.head == head
        assert np.array_equal(back.forward(x), net.forward(x))
        assert back.to_bytes() == path.read_bytes()


def test_checkpoint_layout():
    net = Mlp([np.arange(6.0).reshape(2, 3)], [np.array([7.0, 8.0, 9.0])], "linear")
    data = net.to_bytes()
    assert data[:8] == b"MLPCKPT\n"
    assert np.frombuffer(data[8:28], "<u4").tolist() == [1, 1, 1, 2, 3]
    assert np.frombuffer(data[28:], "<f8").tolist() == [0, 1, 2, 3, 4, 5, 7, 8, 9]
    assert len(data) == 28 + 8 * 9
    with pytest.raises(ValueError):
        Mlp.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError, match="trailing"):
        Mlp.from_bytes(data + b"\0")


def test_float32_inference_close():
    rng = np.random.default_rng(9)
    net = Mlp.init([10, 32, 3], "softmax", rng)
    x = rng.random((20, 10))
    assert np.max(np.abs(net.infer_logits(x) - net.logits(x))) < 1e-4
