import numpy as np
import pytest

from algorithms import distdp, perceptnet
from algorithms.perceptnet import Adam, PerceptionNet, TrainConfig
from features import pendulum_training
from features.pendulum import Camera
from features.pendulum_training import LABEL_SCALE, NetEstimator, generate_dataset, new_net, signed_error_summary
from utils.errors import TrainingDivergedError


def numeric_gradient(net, loss_of_params, h=1e-5):
    flat = net.flat_params()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        net.set_flat_params(up)
        f_up = loss_of_params()
        net.set_flat_params(down)
        f_down = loss_of_params()
        grad[i] = (f_up - f_down) / (2 * h)
    net.set_flat_params(flat)
    return grad


def test_zero_network_outputs_zero():
    net = PerceptionNet([5, 4, 2], "tanh", weights=[np.zeros((5, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2)])
    np.testing.assert_array_equal(net.forward(np.random.default_rng(0).normal(size=(3, 5))), 0.0)


def test_forward_is_deterministic_and_checks_shape():
    net = PerceptionNet([3, 3, 2], seed=1)
    x = np.ones((2, 3))
    np.testing.assert_array_equal(net.forward(x), net.forward(x))
    assert net.n_params == 3 * 3 + 3 + 3 * 2 + 2
    with pytest.raises(ValueError):
        net.forward(np.ones((2, 4)))
    with pytest.raises(ValueError):
        PerceptionNet([3, 2], "softmax")


@pytest.mark.parametrize("head", ["tanh", "sigmoid", "linear"])
def test_backward_matches_finite_differences(head):
    rng = np.random.default_rng(2)
    net = PerceptionNet([3, 3, 2], head, seed=4)
    x = rng.normal(size=(5, 3))
    target = rng.uniform(-0.5, 0.5, size=(5, 2))

    out, cache = net.forward_cache(x)
    _, dout = perceptnet.mse_and_grad(target, out)
    analytic = np.concatenate([g.ravel() for g in net.backward(cache, dout)])
    numeric = numeric_gradient(net, lambda: perceptnet.loss_baseline(target, net.forward(x)))
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_risk_loss_gradient_matches_finite_differences(pendulum_table):
    rng = np.random.default_rng(3)
    net = PerceptionNet([4, 6, 2], "tanh", seed=5)
    x = rng.normal(size=(6, 4))
    s = np.column_stack([rng.uniform(-0.5, 0.5, 6), rng.uniform(-1.5, 1.5, 6)])

    def loss():
        return perceptnet.risk_loss_and_grad(s, net.forward(x) * LABEL_SCALE, pendulum_table, 0.3, 1.0)[0]

    out, cache = net.forward_cache(x)
    _, ds_hat = perceptnet.risk_loss_and_grad(s, out * LABEL_SCALE, pendulum_table, 0.3, 1.0)
    analytic = np.concatenate([g.ravel() for g in net.backward(cache, ds_hat * LABEL_SCALE)])
    numeric = numeric_gradient(net, loss, h=1e-6)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_risk_loss_decomposes(pendulum_table):
    rng = np.random.default_rng(6)
    s = np.column_stack([rng.uniform(-0.5, 0.5, 10), rng.uniform(-1.0, 1.0, 10)])
    s_hat = s + rng.normal(0.0, 0.1, size=s.shape)
    lam = 2.5
    term, _ = perceptnet.risk_term_and_grad(s, s_hat, pendulum_table, 0.5)
    total = perceptnet.loss_risk(s, s_hat, pendulum_table, 0.5, lam)
    assert total - lam * term == pytest.approx(perceptnet.loss_baseline(s, s_hat), rel=1e-12)
    assert perceptnet.loss_risk(s, s_hat, pendulum_table, 0.5, 0.0) == perceptnet.loss_baseline(s, s_hat)


def test_exact_estimate_pays_only_zero_error_risk(pendulum_table):
    s = np.array([[0.1, -0.3]])
    assert perceptnet.loss_baseline(s, s) == 0.0
    expected = distdp.risk(pendulum_table, s[0], [0.0, 0.0], 0.2)
    assert perceptnet.loss_risk(s, s, pendulum_table, 0.2, 1.0) == pytest.approx(expected)


def test_risk_loss_prefers_overestimating_the_angle(pendulum_table):
    s = np.array([[0.2, 0.0]])
    under = perceptnet.loss_risk(s, s + [-0.2, 0.0], pendulum_table, 0.0, 1.0)
    over = perceptnet.loss_risk(s, s + [0.2, 0.0], pendulum_table, 0.0, 1.0)
    assert perceptnet.loss_baseline(s, s + [-0.2, 0.0]) == perceptnet.loss_baseline(s, s + [0.2, 0.0])
    assert under > over


def test_weighted_cross_entropy():
    target = np.array([[1.0, 0.0], [0.0, 0.0]])
    p = np.array([[0.8, 0.3], [0.1, 0.5]])
    mean, dmean = perceptnet.bce_and_grad(target, p)
    total, dtotal = perceptnet.bce_and_grad(target, p, weight=np.full_like(p, 0.25))
    assert total == pytest.approx(mean)
    np.testing.assert_allclose(dtotal, dmean)
    only_first, grad = perceptnet.bce_and_grad(target, p, weight=np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert only_first == pytest.approx(-np.log(0.8))
    np.testing.assert_allclose(grad[0, 0], -1.0 / 0.8)
    assert np.all(grad.ravel()[1:] == 0.0)


def test_adam_first_step_moves_by_learning_rate():
    p = np.array([5.0])
    opt = Adam([p], lr=0.1)
    opt.step([2 * p])
    assert p[0] == pytest.approx(4.9)
    for _ in range(2000):
        opt.step([2 * p])
    assert abs(p[0]) < 0.5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")


def test_memorizes_a_single_example():
    rng = np.random.default_rng(7)
    x = np.tile(rng.normal(size=(1, 4)), (8, 1))
    target = np.tile([[0.3, -0.6]], (8, 1))
    net = PerceptionNet([4, 16, 16, 2], "tanh", seed=8)
    config = TrainConfig(epochs=2000, batch_size=8, lr=1e-3, seed=0)
    net, report = perceptnet.fit(net, x, lambda batch, out: perceptnet.mse_and_grad(target[batch], out), config)
    assert report.final_loss < 1e-4
    assert perceptnet.loss_baseline(target, net.forward(x)) < 1e-4
    assert report.as_row()["epochs"] == 2000


def test_training_is_reproducible():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(40, 4))
    target = np.tanh(x[:, :2])
    config = TrainConfig(epochs=20, batch_size=8, seed=3)

    def run():
        net = PerceptionNet([4, 8, 2], "tanh", seed=1)
        return perceptnet.fit(net, x, lambda b, out: perceptnet.mse_and_grad(target[b], out), config)[1]

    first, second = run(), run()
    assert first.final_loss == pytest.approx(second.final_loss, abs=1e-9)
    assert first.trace[-1] < first.trace[0]


def test_divergence_is_reported():
    net = PerceptionNet([2, 2], seed=0)
    with pytest.raises(TrainingDivergedError):
        perceptnet.fit(net, np.ones((4, 2)), lambda b, out: (float("nan"), np.zeros_like(out)), TrainConfig(epochs=1))


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        perceptnet.fit(PerceptionNet([2, 2]), np.empty((0, 2)), None, TrainConfig())


def test_uniform_dataset_covers_the_grid(pendulum_table):
    camera = Camera(size=8)
    data = generate_dataset("uniform", 10_000, camera=camera, seed=1, grid=pendulum_table.grid)
    assert data.observations.shape == (10_000, 2 * 8 * 8)
    assert data.provenance == "uniform"
    np.testing.assert_allclose(data.unscale(data.labels), data.states)
    assert np.all(np.abs(data.labels) <= 1.0)
    for d, axis in enumerate(pendulum_table.grid.axes):
        col = data.states[:, d]
        midpoint = 0.5 * (axis[0] + axis[-1])
        assert abs(col.mean() - midpoint) <= 3 * col.std(ddof=1) / np.sqrt(col.size)


def test_risk_weighted_dataset(pendulum_table):
    camera = Camera(size=8)
    data = generate_dataset("risk_weighted", 50, table=pendulum_table, alpha=0.2, camera=camera, seed=2)
    assert len(data) == 50
    assert np.all(distdp.risk_weight_batch(pendulum_table, data.states, 0.2) > 0)
    again = generate_dataset("risk_weighted", 50, table=pendulum_table, alpha=0.2, camera=camera, seed=2)
    np.testing.assert_array_equal(data.observations, again.observations)
    with pytest.raises(ValueError):
        generate_dataset("risk_weighted", 50, camera=camera)
    with pytest.raises(ValueError):
        generate_dataset("grid", 50, camera=camera)


def test_train_reduces_loss(pendulum_table):
    camera = Camera(size=8)
    data = generate_dataset("uniform", 200, camera=camera, seed=3)
    net = new_net(camera, hidden=(32,), seed=0)
    config = TrainConfig(epochs=20, batch_size=32, loss="risk", lam=1.0, alpha=0.2, seed=1)
    net, report = pendulum_training.train(net, data, config, table=pendulum_table)
    assert report.trace[-1] < report.trace[0]
    with pytest.raises(ValueError):
        pendulum_training.train(net, data, config)


@pytest.mark.slow
def test_large_lambda_biases_errors_toward_the_safe_side(pendulum_table):
    camera = Camera(size=16)
    data = generate_dataset("uniform", 3000, table=pendulum_table, camera=camera, seed=4)
    held_out = np.column_stack([np.full(200, 0.2), np.linspace(-0.2, 0.2, 200)])
    bias = {}
    for lam in (0.0, 100.0):
        config = TrainConfig(epochs=60, batch_size=32, loss="risk", lam=lam, alpha=0.0, seed=2)
        net, _ = pendulum_training.train(new_net(camera, seed=0), data, config, table=pendulum_table)
        bias[lam] = signed_error_summary(NetEstimator(net), held_out, camera=camera, seed=5)[0]
    assert bias[100.0] > bias[0.0]
