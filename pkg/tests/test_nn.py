import numpy as np
import pytest

from ceskd import nn
from ceskd.exceptions import ConfigurationError, NonFiniteError, StateError

from conftest import numeric_grad, random_model, rel_error


def test_dense_identity():
    model = nn.init_weights([nn.dense(3, 3)], 0, (3,), dtype=np.float64)
    model.params[0]["W"][...] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(nn.forward(model, x), x)


def test_relu_definition():
    model = nn.Model([nn.relu(), nn.flatten()], [{}, {}], (3,))
    np.testing.assert_array_equal(nn.forward(model, np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])


def test_forward_matches_naive_loops(gen):
    model = nn.init_weights(nn.mlp_specs(4, [5], 3), 7, (4,), dtype=np.float64)
    x = gen.normal(size=(6, 4))
    W1, b1 = model.params[0]["W"], model.params[0]["b"]
    W2, b2 = model.params[2]["W"], model.params[2]["b"]
    expected = np.zeros((6, 3))
    for n in range(6):
        h = [max(0.0, sum(x[n, i] * W1[i, j] for i in range(4)) + b1[j]) for j in range(5)]
        for k in range(3):
            expected[n, k] = sum(h[j] * W2[j, k] for j in range(5)) + b2[k]
    np.testing.assert_allclose(nn.forward(model, x), expected, rtol=1e-12)


def test_conv_matches_naive_loops(gen):
    spec = nn.conv2d(2, 3, 3, stride=2, padding=1)
    model = nn.init_weights([spec, nn.flatten(), nn.dense(3 * 3 * 3, 2)], 3, (2, 5, 5), dtype=np.float64)
    x = gen.normal(size=(2, 2, 5, 5))
    W, b = model.params[0]["W"], model.params[0]["b"]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3, 3))
    for n in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * W[o]).sum() + b[o]
    out, _ = nn._conv_forward(spec, model.params[0], x)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_maxpool_forward():
    model = nn.Model([nn.maxpool2d(2), nn.flatten()], [{}, {}], (1, 4, 4))
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(nn.forward(model, x), [[5, 7, 13, 15]])


def test_zero_loss_gradient_gives_zero_grads(gen):
    model, x = random_model("maxpool2d", gen)
    z = nn.forward(model, x)
    for g in nn.backward(model, np.zeros_like(z)):
        for v in g.values():
            assert not v.any()


def test_single_dense_squared_error_closed_form():
    # L = 0.5 * ||x W + b - t||^2 on a hand-computed 2x2 case
    model = nn.init_weights([nn.dense(2, 2)], 0, (2,), dtype=np.float64)
    model.params[0]["W"][...] = [[1.0, 2.0], [3.0, 4.0]]
    model.params[0]["b"][...] = [0.5, -0.5]
    x = np.array([[1.0, 2.0]])
    t = np.array([[0.0, 1.0]])
    z = nn.forward(model, x)           # [7.5, 9.5]
    delta = z - t                      # [7.5, 8.5]
    g = nn.backward(model, delta)[0]
    np.testing.assert_allclose(g["W"], [[7.5, 8.5], [15.0, 17.0]])
    np.testing.assert_allclose(g["b"], [7.5, 8.5])


@pytest.mark.parametrize("kind", ["dense", "conv2d", "maxpool2d"])
@pytest.mark.parametrize("trial", range(4))
def test_gradients_match_finite_differences(kind, trial):
    gen = np.random.default_rng(100 + trial)
    model, x = random_model(kind, gen, seed=trial)
    R = gen.normal(size=nn.forward(model, x).shape)

    def loss():
        return float((nn.forward(model, x, cache=False) * R).sum())

    nn.forward(model, x)
    grads = nn.backward(model, R)
    for i, name, arr in model.parameters():
        assert rel_error(grads[i][name], numeric_grad(loss, arr)) < 1e-4


def test_backward_does_not_mutate_params(gen):
    model, x = random_model("conv2d", gen)
    before = model.checksum()
    z = nn.forward(model, x)
    nn.backward(model, np.ones_like(z))
    assert model.checksum() == before


def test_backward_before_forward_is_state_error(gen):
    model, _ = random_model("dense", gen)
    with pytest.raises(StateError):
        nn.backward(model, np.zeros((2, 3)))


def test_shape_mismatch_rejected_at_build():
    with pytest.raises(ConfigurationError, match="layer 2"):
        nn.init_weights([nn.dense(4, 8), nn.relu(), nn.dense(7, 3)], 0, (4,))
    with pytest.raises(ConfigurationError, match="layer 0"):
        nn.init_weights([nn.conv2d(3, 4, 3), nn.flatten(), nn.dense(4, 2)], 0, (1, 5, 5))


def test_forward_batch_shape_mismatch_names_layer():
    model = nn.init_weights(nn.mlp_specs(4, [3], 2), 0, (4,))
    with pytest.raises(ConfigurationError, match="layer 0"):
        nn.forward(model, np.zeros((2, 5)))


def _scalar_model(value):
    model = nn.init_weights([nn.dense(1, 1)], 0, (1,), dtype=np.float64)
    model.params[0]["W"][...] = value
    model.params[0]["b"][...] = 0.0
    return model


def test_plain_sgd_step():
    model = _scalar_model(1.0)
    opt = nn.OptimizerState.for_model(model, momentum=0.0, weight_decay=0.0, nesterov=False)
    nn.sgd_step(model, [{"W": np.array([[0.5]]), "b": np.array([0.0])}], opt, 0.1)
    assert model.params[0]["W"][0, 0] == pytest.approx(1.0 - 0.1 * 0.5, abs=1e-15)


def test_weight_decay_two_step_trace():
    lr, wd, mu, p0 = 0.1, 1e-4, 0.9, 2.0
    model = _scalar_model(p0)
    opt = nn.OptimizerState.for_model(model, momentum=mu, weight_decay=wd, nesterov=True)
    zero = [{"W": np.zeros((1, 1)), "b": np.zeros(1)}]
    # step 1: g = wd p0, buf = g, d = g + mu buf = (1 + mu) wd p0
    p1 = p0 - lr * (1 + mu) * wd * p0
    nn.sgd_step(model, zero, opt, lr)
    assert model.params[0]["W"][0, 0] == pytest.approx(p1, rel=1e-14)
    # step 2: g = wd p1, buf = mu wd p0 + wd p1, d = g + mu buf
    g = wd * p1
    buf = mu * wd * p0 + g
    p2 = p1 - lr * (g + mu * buf)
    nn.sgd_step(model, zero, opt, lr)
    assert model.params[0]["W"][0, 0] == pytest.approx(p2, rel=1e-14)


def test_nesterov_matches_hand_unrolled_recurrence():
    lr, mu = 0.05, 0.9
    grads = [0.3, -0.7]
    p, buf = 1.5, 0.0
    expected = []
    for g in grads:
        buf = mu * buf + g
        p = p - lr * (g + mu * buf)
        expected.append(p)
    model = _scalar_model(1.5)
    opt = nn.OptimizerState.for_model(model, momentum=mu, weight_decay=0.0, nesterov=True)
    for g, e in zip(grads, expected):
        nn.sgd_step(model, [{"W": np.array([[g]]), "b": np.zeros(1)}], opt, lr)
        assert model.params[0]["W"][0, 0] == pytest.approx(e, rel=1e-14)


def test_non_finite_gradient_aborts_without_update():
    model = _scalar_model(1.0)
    opt = nn.OptimizerState.for_model(model)
    with pytest.raises(NonFiniteError):
        nn.sgd_step(model, [{"W": np.array([[np.nan]]), "b": np.zeros(1)}], opt, 0.1)
    assert model.params[0]["W"][0, 0] == 1.0
    assert not opt.buffers[0]["W"].any()


def test_optimizer_buffers_mirror_params(gen):
    model, _ = random_model("conv2d", gen)
    opt = nn.OptimizerState.for_model(model)
    for p, b in zip(model.params, opt.buffers):
        assert {k: v.shape for k, v in p.items()} == {k: v.shape for k, v in b.items()}


@pytest.mark.parametrize("epoch, expected", [(0, 0.1), (29, 0.1), (30, 0.01), (90, 0.001), (149, 0.0001)])
def test_lr_schedule_reference_constants(epoch, expected):
    sched = nn.LRSchedule(0.1, (30, 90, 120), 0.1)
    assert nn.lr_at(sched, epoch) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_requires_increasing_milestones():
    with pytest.raises(ConfigurationError):
        nn.LRSchedule(0.1, (30, 30), 0.1)


def test_init_deterministic_and_seed_sensitive():
    specs = nn.mlp_specs(8, [16], 4)
    a, b, c = (nn.init_weights(specs, s, (8,)) for s in (5, 5, 6))
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_init_mean_within_three_sigma():
    model = nn.init_weights([nn.dense(400, 500)], 11, (400,), dtype=np.float64)
    W = model.params[0]["W"]
    bound = np.sqrt(6.0 / 400)
    sigma_of_mean = bound / np.sqrt(3.0) / np.sqrt(W.size)
    assert abs(W.mean()) < 3 * sigma_of_mean
    assert np.abs(W).max() <= bound


def test_layer_text_round_trip():
    for spec in [nn.dense(3, 4), nn.conv2d(1, 2, 3, 2, 1), nn.relu(), nn.maxpool2d(2), nn.flatten()]:
        assert nn.LayerSpec.from_text(spec.to_text()) == spec
