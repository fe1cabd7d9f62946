import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_net
from oracles import central_diff, rel_err, straight_line_forward
from faircert.errors import DimensionError, UnsupportedOpError, ValidationError
from faircert.nn import (
    AttackConfig, Loss, ModelParams, TrainState, adam_step, forward, grad, logits, make_loss, pgd_maximize,
    predict,
)


# forward ----------------------------------------------------------------

def test_identity_layer_zero_logits_is_uniform():
    p = ModelParams([(np.eye(2), np.zeros(2))])
    assert np.allclose(forward(p, [0.0, 0.0]), [0.5, 0.5], atol=0)


def test_zero_input_zero_bias_gives_uniform():
    rng = np.random.default_rng(0)
    p = ModelParams([(rng.normal(size=(5, 3)), np.zeros(5)), (rng.normal(size=(4, 5)), np.zeros(4))])
    assert np.allclose(forward(p, np.zeros(3)), np.full(4, 0.25), atol=1e-15)


def test_forward_matches_straight_line_reimplementation(net_2x16):
    x = np.linspace(-1, 1, 6)
    ref = straight_line_forward([(w.tolist(), b.tolist()) for w, b in net_2x16.layers], x)
    assert np.allclose(forward(net_2x16, x), ref, atol=1e-14)


def test_forward_shape_mismatch_raises(net_2x16):
    with pytest.raises(DimensionError):
        forward(net_2x16, np.zeros(5))


def test_forward_deterministic(net_2x16):
    X = np.random.default_rng(0).normal(size=(20, 6))
    assert np.array_equal(forward(net_2x16, X), forward(net_2x16, X))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_head_sums_to_one(z):
    k = len(z)
    p = ModelParams([(np.eye(k), np.asarray(z))])
    out = forward(p, np.zeros(k))
    assert abs(out.sum() - 1) <= 1e-9 and np.all(out >= 0)


def test_model_validation_rejects_bad_shapes_and_nans():
    with pytest.raises(DimensionError):
        ModelParams([(np.ones((3, 2)), np.zeros(3)), (np.ones((2, 4)), np.zeros(2))])
    with pytest.raises(ValidationError):
        ModelParams([(np.array([[np.nan]]), np.zeros(1))])


def test_model_json_roundtrip_and_rejects_nonfinite(tmp_path, net_2x16):
    path = tmp_path / "m.json"
    net_2x16.save(path)
    back = ModelParams.load(path)
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), net_2x16.arrays()))
    doc = json.loads(path.read_text())
    assert doc["activation"] == "relu" and set(doc["layers"][0]) == {"w", "b"}
    path.write_text(path.read_text().replace(str(doc["layers"][0]["b"][0]), "NaN", 1))
    with pytest.raises(ValidationError):
        ModelParams.load(path)


def test_predict_is_argmax(net_2x16):
    X = np.random.default_rng(1).normal(size=(10, 6))
    assert np.array_equal(predict(net_2x16, X), np.argmax(logits(net_2x16, X), axis=1))


# grad -------------------------------------------------------------------

def test_constant_loss_has_zero_gradient(net_2x16):
    g = grad(net_2x16, (np.ones((3, 6)), np.array([0, 1, 0])), make_loss("constant", value=2.5))
    assert all(np.all(a == 0) for a in g.arrays())


def test_single_layer_ce_gradient_closed_form():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x, y = rng.normal(size=4), 2
    g = grad(ModelParams([(W, b)]), (x[None], np.array([y])), "ce")
    z = W @ x + b
    p = np.exp(z - z.max())
    p /= p.sum()
    onehot = np.eye(3)[y]
    assert np.allclose(g.layers[0][0], np.outer(p - onehot, x), atol=1e-14)
    assert np.allclose(g.layers[0][1], p - onehot, atol=1e-14)


def test_ce_gradient_matches_finite_differences(net_2x16):
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(8, 6)), rng.integers(0, 2, 8)
    loss = make_loss("ce")
    g = grad(net_2x16, (X, Y), loss).flat()
    fd = central_diff(lambda t: loss.value(net_2x16.with_flat(t), X, Y), net_2x16.flat())
    assert rel_err(g, fd) <= 1e-4


def test_unregistered_losses_are_rejected(net_2x16):
    class Custom(Loss):
        def value_and_grad(self, params, X, Y):
            return 0.0, params.zeros_like()

    batch = (np.zeros((1, 6)), np.array([0]))
    with pytest.raises(UnsupportedOpError):
        grad(net_2x16, batch, Custom())
    with pytest.raises(UnsupportedOpError):
        grad(net_2x16, batch, lambda p: 0.0)
    with pytest.raises(UnsupportedOpError):
        make_loss("hinge")


# adam -------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = ModelParams([(np.ones((2, 2)), np.ones(2))])
    s = adam_step(TrainState(p), p.zeros_like())
    assert s.step == 1 and all(np.array_equal(a, b) for a, b in zip(s.params.arrays(), p.arrays()))


def test_adam_first_step_is_signed_lr():
    rng = np.random.default_rng(0)
    p = ModelParams([(rng.normal(size=(3, 2)), rng.normal(size=3))])
    g = ModelParams([(rng.normal(size=(3, 2)), rng.normal(size=3))])
    s = adam_step(TrainState(p, lr=0.01, eps=0.0), g)
    for new, old, gg in zip(s.params.arrays(), p.arrays(), g.arrays()):
        assert np.allclose(new - old, -0.01 * np.sign(gg), atol=1e-15)


def test_adam_converges_on_quadratic():
    s = TrainState(ModelParams([(np.zeros((1, 1)), np.zeros(1))]), lr=0.1)
    for _ in range(100):
        th = s.params.layers[0][0]
        s = adam_step(s, ModelParams([(2 * (th - 3), np.zeros(1))]))
    assert abs(s.params.layers[0][0][0, 0] - 3) < 0.1


def test_adam_shape_check():
    s = TrainState(ModelParams([(np.zeros((1, 1)), np.zeros(1))]))
    with pytest.raises(DimensionError):
        adam_step(s, ModelParams([(np.zeros((2, 1)), np.zeros(2))]))


# pgd --------------------------------------------------------------------

def _box(lo, hi):
    return lambda P: np.clip(P, lo, hi)


def test_pgd_constant_objective_returns_start():
    start = np.array([0.3, -0.2])
    cfg = AttackConfig(steps=5, step_size=0.1, restarts=3, projection=_box(-1, 1))
    x, v = pgd_maximize(lambda x: (4.0, np.zeros_like(x)), start, cfg, seed=0)
    assert v == 4.0 and np.array_equal(x, start)


def test_pgd_linear_over_box_reaches_corner():
    c = np.array([1.0, -2.0, 0.5])
    cfg = AttackConfig(steps=50, step_size=0.2, restarts=1, projection=_box(-1, 1))
    x, v = pgd_maximize(lambda x: (x @ c, c), np.zeros(3), cfg, seed=0)
    assert np.allclose(x, np.sign(c)) and np.isclose(v, np.abs(c).sum())


def test_pgd_beats_random_sampling():
    rng = np.random.default_rng(2)
    net = random_net(rng, [3, 16, 16, 2])
    x0 = rng.normal(size=3)
    lo, hi = x0 - 0.1, x0 + 0.1
    from faircert.nn import backward, forward_cache, softmax, softmax_backward

    def obj(P):
        z, cache = forward_cache(net, P)
        p = softmax(z)
        dp = np.zeros_like(p)
        dp[:, 0] = 1
        _, dX = backward(net, cache, softmax_backward(p, dp), need_params=False)
        return p[:, 0], dX

    cfg = AttackConfig(steps=30, step_size=0.02, restarts=3, projection=_box(lo, hi),
                       sampler=lambda r: r.uniform(lo, hi)[None])
    X, V = pgd_maximize(obj, x0[None], cfg, seed=0)
    x, v = X[0], V[0]
    samples = rng.uniform(lo, hi, size=(1000, 3))
    assert np.all(x >= lo) and np.all(x <= hi)
    assert v >= forward(net, samples)[:, 0].max() - 1e-12
    assert np.isclose(v, forward(net, x)[0], atol=1e-15)


def test_pgd_nonfinite_objective_keeps_best_finite():
    calls = {"n": 0}

    def obj(x):
        calls["n"] += 1
        return (np.nan if x[0] > 0.35 else x[0]), np.ones_like(x)

    cfg = AttackConfig(steps=10, step_size=0.1, restarts=1, projection=_box(-1, 1))
    x, v = pgd_maximize(obj, np.array([0.0]), cfg, seed=0)
    assert np.isfinite(v) and v <= 0.35 and v >= 0.3 - 1e-12


@given(st.integers(0, 1000))
def test_pgd_feasible_and_monotone_in_restarts(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [2, 8, 2])
    x0 = rng.normal(size=(4, 2))
    lo, hi = x0 - 0.2, x0 + 0.2

    def obj(P):
        from faircert.nn import backward, forward_cache, softmax, softmax_backward
        z, cache = forward_cache(net, P)
        p = softmax(z)
        dp = np.zeros_like(p)
        dp[:, 1] = 1
        _, dX = backward(net, cache, softmax_backward(p, dp), need_params=False)
        return p[:, 1], dX

    vals = []
    for r in (1, 2, 4):
        cfg = AttackConfig(steps=5, step_size=0.05, restarts=r, projection=lambda P: np.clip(P, lo, hi),
                           sampler=lambda g: g.uniform(lo, hi))
        X, v = pgd_maximize(obj, x0, cfg, seed=seed)
        assert np.all(X >= lo - 1e-15) and np.all(X <= hi + 1e-15)
        vals.append(v)
    assert np.all(vals[1] >= vals[0]) and np.all(vals[2] >= vals[1])


def test_attack_config_validation():
    with pytest.raises(ValidationError):
        AttackConfig(steps=0)
    with pytest.raises(ValidationError):
        AttackConfig(step_size=0.0)
    with pytest.raises(ValidationError):
        AttackConfig(restarts=0)
