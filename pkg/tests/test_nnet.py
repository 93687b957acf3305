import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from bayeslidar.nnet import (
    LOGVAR_BIAS_INIT, AdamState, Batch, HeadOutput, ModelFormatError, Network, NumericError, TrainConfig,
    backward_and_step, fit, forward, load_model, loss_and_grads, loss_cls, loss_reg_attenuated,
    loss_reg_smooth_l1, save_model, smooth_l1, softmax, total_loss,
)


def tiny(aleatoric=False, p=0.0, seed=0, perturb=True):
    net = Network(5, (4, 3), aleatoric=aleatoric, dropout_rate=p, rng=seed)
    if perturb:
        r = np.random.default_rng(seed + 1000)
        for v in net.params.values():
            v += r.normal(scale=0.1, size=v.shape)
    return net


def batch(seed=0, n=6, d=5):
    r = np.random.default_rng(seed)
    labels = np.array([1, 0] * (n // 2))
    return Batch(r.normal(size=(n, d)), labels, r.normal(scale=0.5, size=(n, 24)))


def test_network_shapes_and_init():
    net = Network(10, (8, 6), aleatoric=True)
    assert net.layer_sizes == (10, 8, 6)
    assert net.params["hidden0.W"].shape == (10, 8)
    assert net.params["logvar.W"].shape == (6, 24)
    assert np.all(net.params["logvar.b"] == LOGVAR_BIAS_INIT)
    assert net.param_count() == 10 * 8 + 8 + 8 * 6 + 6 + 6 * 2 + 2 + 2 * (6 * 24 + 24)
    assert "logvar.W" not in Network(10, (8,)).params
    with pytest.raises(ValueError):
        Network(3, dropout_rate=1.0)


def test_softmax_examples():
    assert softmax(np.array([0.0, 0.0])) == pytest.approx([0.5, 0.5])
    e = math.e
    assert softmax(np.array([1.0, 0.0])) == pytest.approx([e / (e + 1), 1 / (e + 1)])
    assert softmax(np.array([1.0, 0.0]))[0] == pytest.approx(0.7311, abs=1e-4)
    assert np.all(np.isfinite(softmax(np.array([1000.0, -1000.0]))))


@given(st.integers(0, 2**31))
def test_zero_dropout_equals_deterministic(seed):
    net = tiny(p=0.0)
    x = np.random.default_rng(seed).normal(size=(3, 5))
    a = forward(net, x, "mc_dropout", np.random.default_rng(seed))
    b = forward(net, x, "deterministic")
    assert np.array_equal(a.offsets, b.offsets) and np.array_equal(a.class_probs, b.class_probs)


def test_dropout_is_inverted():
    # one hidden layer of width 1 driven to a known activation
    net = Network(1, (1,), dropout_rate=0.5, rng=0)
    net.params["hidden0.W"][:] = 1.0
    net.params["reg.W"][:] = 1.0
    net.params["reg.b"][:] = 0.0
    out = forward(net, np.ones((2000, 1)), "mc_dropout", np.random.default_rng(0)).offsets[:, 0]
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert out.mean() == pytest.approx(1.0, abs=0.1)
    with pytest.raises(ValueError):
        forward(net, np.ones((1, 1)), "train")  # dropout without a generator


def test_forward_single_vector_and_errors():
    net = tiny(aleatoric=True)
    out = forward(net, np.zeros(5))
    assert out.class_probs.shape == (2,) and out.log_vars.shape == (24,)
    with pytest.raises(ValueError):
        forward(net, np.zeros(4))
    net.params["hidden0.W"][0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        forward(net, np.ones(5))
    assert "hidden0" in str(info.value)


def test_cls_loss_examples():
    assert loss_cls([0.0, 1.0], 1) == pytest.approx(1e-7, rel=1e-3)
    assert loss_cls([0.5, 0.5], 1) == pytest.approx(math.log(2))
    assert loss_cls([1 - 1e-7, 1e-7], 1) == pytest.approx(-math.log(1e-7))
    assert loss_cls([1.0, 0.0], 1) == pytest.approx(16.118, abs=1e-3)
    batch_vals = loss_cls(np.array([[0.5, 0.5], [0.2, 0.8]]), np.array([0, 1]))
    assert batch_vals == pytest.approx([math.log(2), -math.log(0.8)])


def test_smooth_l1_examples():
    assert loss_reg_smooth_l1(np.ones(24), np.ones(24)) == 0
    assert smooth_l1(0.5) == pytest.approx(0.125)
    assert smooth_l1(2.0) == pytest.approx(1.5)
    assert smooth_l1(-2.0) == pytest.approx(1.5)
    v = np.zeros(24)
    v[3] = 0.5
    assert loss_reg_smooth_l1(v, np.zeros(24)) == pytest.approx(0.125)


def test_attenuated_examples():
    r = np.random.default_rng(0).normal(size=24)
    assert loss_reg_attenuated(r, np.zeros(24), np.zeros(24)) == pytest.approx(0.5 * loss_reg_smooth_l1(r, 0))
    assert float(loss_reg_attenuated([0.5], [0.0], [0.0])) == pytest.approx(0.0625)
    lam = np.linspace(-5, 1, 60001)
    vals = loss_reg_attenuated(np.full((len(lam), 1), 0.5), np.zeros((len(lam), 1)), lam[:, None])
    assert lam[np.argmin(vals)] == pytest.approx(math.log(0.125), abs=1e-4)
    assert math.log(0.125) == pytest.approx(-2.0794, abs=1e-4)


def test_attenuated_clamps_log_variance():
    a = loss_reg_attenuated([1.0], [0.0], [50.0])
    b = loss_reg_attenuated([1.0], [0.0], [10.0])
    assert a == b


def test_total_loss_examples():
    out = HeadOutput(np.array([[0.3, 0.7], [0.9, 0.1]]), np.zeros((2, 24)))
    b = Batch(np.zeros((2, 3)), np.array([1, 0]), np.ones((2, 24)))
    cfg = TrainConfig(reg_weight=0.0, weight_decay=0.0)
    lb = total_loss(out, b, cfg)
    assert lb.total == pytest.approx((-math.log(0.7) - math.log(0.9)) / 2)

    perfect = HeadOutput(np.array([[0.0, 1.0]]), np.full((1, 24), 0.25), np.zeros((1, 24)))
    one = Batch(np.zeros((1, 3)), np.array([1]), np.full((1, 24), 0.25))
    lb = total_loss(perfect, one, TrainConfig(weight_decay=0.0, cls_weight=2.0))
    assert lb.total == pytest.approx(2.0 * 1e-7, rel=1e-3)
    with pytest.raises(ValueError):
        total_loss(out, Batch(np.zeros((0, 3)), np.zeros(0, int), np.zeros((0, 24))), cfg)


@pytest.mark.parametrize("aleatoric", [False, True])
def test_total_loss_matches_scalar_oracle(aleatoric):
    net = tiny(aleatoric)
    b = batch(3, n=2)
    cfg = TrainConfig(weight_decay=1e-3, cls_weight=1.3, reg_weight=0.7)
    out = forward(net, b.features)
    got = total_loss(out, b, cfg, net).total
    ref = oracles.total_loss(
        out.class_probs.tolist(), b.labels.tolist(), out.offsets.tolist(), b.offsets.tolist(),
        None if out.log_vars is None else out.log_vars.tolist(), net.params, 1.3, 0.7, 1e-3,
    )
    assert got == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("aleatoric", [False, True])
@pytest.mark.parametrize("reg_weight", [0.0, 0.8])
def test_gradients_match_finite_differences(aleatoric, reg_weight):
    net, b = tiny(aleatoric, seed=7), batch(11)
    cfg = TrainConfig(dropout_rate=0.0, weight_decay=1e-3, reg_weight=reg_weight)
    _, grads = loss_and_grads(net, b, cfg, mode="deterministic")
    f = lambda: loss_and_grads(net, b, cfg, mode="deterministic")[0].total
    for name, p in net.params.items():
        num = oracles.numeric_grad(f, p)
        assert oracles.rel_error(grads[name], num).max() < 1e-4, name


def test_dropout_gradients_use_the_sampled_masks():
    net, b = tiny(seed=4, p=0.5), batch(5)
    cfg = TrainConfig(dropout_rate=0.5)
    _, grads = loss_and_grads(net, b, cfg, np.random.default_rng(9))
    f = lambda: loss_and_grads(net, b, cfg, np.random.default_rng(9))[0].total
    num = oracles.numeric_grad(f, net.params["hidden1.W"])
    assert oracles.rel_error(grads["hidden1.W"], num).max() < 1e-4


def test_zero_learning_rate_leaves_parameters():
    net = tiny()
    before = {k: v.copy() for k, v in net.params.items()}
    backward_and_step(net, batch(), TrainConfig(dropout_rate=0.0), AdamState(), 0.0)
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


def test_adam_first_step_moves_by_lr():
    net = tiny()
    before = {k: v.copy() for k, v in net.params.items()}
    cfg = TrainConfig(dropout_rate=0.0)
    _, grads = loss_and_grads(net, batch(), cfg, mode="train", rng=np.random.default_rng(0))
    backward_and_step(net, batch(), cfg, AdamState(), 1e-3, np.random.default_rng(0))
    # bias-corrected first step is lr * g / (|g| + eps)
    for k in before:
        g = grads[k]
        expect = before[k] - 1e-3 * g / (np.abs(g) + 1e-8)
        assert np.allclose(net.params[k], expect, atol=1e-12)


def test_fit_deterministic_and_decreasing():
    r = np.random.default_rng(0)
    x = r.normal(size=(200, 5))
    labels = (x[:, 0] > 0).astype(int)
    data = Batch(x, labels, np.outer(x[:, 1], np.ones(24)) * 0.3)
    cfg = TrainConfig(learning_rates=(1e-2, 1e-3), steps=(150, 50), batch_size=32, log_every=25)
    runs = []
    for _ in range(2):
        net = Network(5, (16,), dropout_rate=0.5, rng=3)
        rows, state = fit(net, data, cfg)
        runs.append((rows, net))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1].params[k], runs[1][1].params[k]) for k in runs[0][1].params)
    rows = runs[0][0]
    assert len(rows) == 8 and rows[-1][0] == 200 and state.t == 200
    assert rows[0][1] == 1e-2 and rows[-1][1] == 1e-3
    assert rows[-1][2] < rows[0][2]


def test_fit_reports_divergence():
    data = batch(0, n=8)
    data.features[0, 0] = np.nan
    with pytest.raises(NumericError):
        fit(tiny(), data, TrainConfig(steps=(5,), learning_rates=(1e-3,), batch_size=8))


def test_model_round_trip(tmp_path):
    net = tiny(aleatoric=True, p=0.5)
    x = np.random.default_rng(0).normal(size=(4, 5))
    state = AdamState()
    backward_and_step(net, batch(), TrainConfig(), state, 1e-3, np.random.default_rng(1))
    save_model(net, tmp_path / "m.blnn", state)
    back, st2 = load_model(tmp_path / "m.blnn")
    assert back.aleatoric and back.dropout_rate == 0.5 and back.hidden == (4, 3)
    assert all(np.array_equal(net.params[k], back.params[k]) for k in net.params)
    assert st2.t == 1 and all(np.array_equal(state.m[k], st2.m[k]) for k in net.params)
    a, b = forward(net, x), forward(back, x)
    assert np.array_equal(a.offsets, b.offsets) and np.array_equal(a.log_vars, b.log_vars)
    save_model(net, tmp_path / "plain.blnn")
    assert load_model(tmp_path / "plain.blnn")[1] is None


def test_model_file_errors(tmp_path):
    path = tmp_path / "m.blnn"
    save_model(tiny(), path)
    data = path.read_bytes()
    for cut in (3, 30, len(data) - 9, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(ModelFormatError):
            load_model(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(ModelFormatError, match="trailing"):
        load_model(path)
