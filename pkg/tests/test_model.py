import math

import mpmath
import numpy as np
import pytest

from fedsim import model as M
from fedsim.errors import NumericError, ShapeError
from fedsim.model import ModelSpec

from conftest import ref_softmax_ce_linear

LIN = ModelSpec("linear", 4, 5)
HID = ModelSpec("one_hidden", 4, 3, hidden_dim=3)


def _batch(spec, m, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(m, spec.feature_dim)), rng.integers(0, spec.num_classes, size=m)


def test_init_params():
    assert np.array_equal(M.init_params(ModelSpec("linear", 2, 3)), np.zeros(9))
    assert ModelSpec("one_hidden", 4, 2, hidden_dim=3).num_params == 23
    a = M.init_params(HID, "gaussian", 0.1, seed=4)
    assert np.array_equal(a, M.init_params(HID, "gaussian", 0.1, seed=4))
    assert a.shape == (HID.num_params,)


def test_zero_params_uniform_loss():
    x, y = _batch(LIN, 7)
    loss, pred, _ = M.forward_loss(LIN, np.zeros(LIN.num_params), x, y)
    assert loss == pytest.approx(math.log(5), abs=1e-12)
    assert np.all(pred == 0)


def test_positive_scaling_keeps_predictions():
    x, y = _batch(LIN, 30, seed=1)
    p = np.random.default_rng(2).normal(size=LIN.num_params)
    for alpha in (0.01, 3.0, 250.0):
        assert np.array_equal(M.predict(LIN, p, x), M.predict(LIN, alpha * p, x))


def _mp_loss(spec, params, x, y):
    mpmath.mp.dps = 50
    c, d = spec.num_classes, spec.feature_dim
    if spec.kind == "linear":
        W = params.reshape(c, d + 1)
        rows = [[mpmath.mpf(float(v)) for v in list(xi) + [1.0]] for xi in x]
        logits = [[mpmath.fsum(W[j, k] * r[k] for k in range(d + 1)) for j in range(c)] for r in rows]
    else:
        h = spec.hidden_dim
        W1 = params[:h * (d + 1)].reshape(h, d + 1)
        W2 = params[h * (d + 1):].reshape(c, h + 1)
        logits = []
        for xi in x:
            r = [mpmath.mpf(float(v)) for v in list(xi) + [1.0]]
            hid = [1 / (1 + mpmath.exp(-mpmath.fsum(W1[j, k] * r[k] for k in range(d + 1))))
                   for j in range(h)] + [mpmath.mpf(1)]
            logits.append([mpmath.fsum(W2[j, k] * hid[k] for k in range(h + 1)) for j in range(c)])
    total = mpmath.fsum(mpmath.log(mpmath.fsum(mpmath.exp(z) for z in zs)) - zs[yi]
                        for zs, yi in zip(logits, y))
    return float(total / len(y))


@pytest.mark.parametrize("spec", [LIN, HID])
@pytest.mark.parametrize("seed", range(3))
def test_loss_matches_high_precision(spec, seed):
    x, y = _batch(spec, 6, seed)
    p = np.random.default_rng(seed + 10).normal(size=spec.num_params)
    loss, _, _ = M.forward_loss(spec, p, x, y)
    assert abs(loss - _mp_loss(spec, p, x, y)) <= 1e-12


def test_zero_param_gradient_closed_form():
    spec = ModelSpec("linear", 3, 4)
    x = np.array([[0.5, -1.0, 2.0]])
    g = M.gradient(spec, np.zeros(spec.num_params), x, np.array([2])).grad.reshape(4, 4)
    xt = np.array([0.5, -1.0, 2.0, 1.0])
    for j in range(4):
        assert np.allclose(g[j], (0.25 - (j == 2)) * xt, atol=1e-15)


def test_linear_gradient_matches_loop_reference():
    x, y = _batch(LIN, 9, seed=5)
    p = np.random.default_rng(6).normal(size=LIN.num_params)
    ref_loss, ref_grad = ref_softmax_ce_linear(p.reshape(5, 5), x, y)
    g = M.gradient(LIN, p, x, y)
    assert g.mean_loss == pytest.approx(ref_loss, abs=1e-12)
    assert np.allclose(g.grad, ref_grad.ravel(), atol=1e-12)


def _fd_grad(spec, p, x, y, h=1e-5):
    out = np.empty_like(p)
    for i in range(len(p)):
        e = np.zeros_like(p)
        e[i] = h
        out[i] = (M.forward_loss(spec, p + e, x, y)[0] - M.forward_loss(spec, p - e, x, y)[0]) / (2 * h)
    return out


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for spec in (ModelSpec("linear", int(rng.integers(1, 6)), int(rng.integers(2, 5))),
                 ModelSpec("one_hidden", int(rng.integers(1, 5)), int(rng.integers(2, 4)),
                           hidden_dim=int(rng.integers(1, 4)))):
        x, y = _batch(spec, int(rng.integers(1, 8)), seed)
        p = rng.normal(size=spec.num_params)
        assert max_rel_error(M.gradient(spec, p, x, y).grad, _fd_grad(spec, p, x, y)) < 1e-4


def test_flop_count_linear():
    spec = ModelSpec("linear", 7, 3)
    m, d, c = 11, 7, 3
    x, y = _batch(spec, m)
    g = M.gradient(spec, np.zeros(spec.num_params), x, y)
    assert g.flops == m * (2 * (d + 1) * c + 5 * c) + m * (4 * (d + 1) * c)


def test_flop_count_one_hidden():
    spec = ModelSpec("one_hidden", 4, 3, hidden_dim=5)
    m = 6
    matmul = 2 * 5 * 5 * m + 2 * 6 * 3 * m
    assert spec.gradient_flops(m) == 3 * matmul + 5 * 3 * m
    assert spec.forward_flops(m) == matmul + 5 * 3 * m


def test_flops_additive():
    x, y = _batch(HID, 10)
    p = np.zeros(HID.num_params)
    whole = M.gradient(HID, p, x, y).flops
    assert whole == M.gradient(HID, p, x[:4], y[:4]).flops + M.gradient(HID, p, x[4:], y[4:]).flops


def test_sgd_step():
    assert np.array_equal(M.sgd_step(np.array([1.0, 1.0]), np.array([1.0, 2.0]), 0.5), [0.5, 0.0])
    p = np.array([3.0, -1.0])
    assert np.array_equal(M.sgd_step(p, np.zeros(2), 0.7), p)
    g = np.array([0.25, -0.5])
    two = M.sgd_step(M.sgd_step(p, g, 0.5), g, 0.25)
    assert np.allclose(two, M.sgd_step(p, g, 0.75), atol=1e-15)
    with pytest.raises(ShapeError):
        M.sgd_step(p, np.zeros(3), 0.1)


def test_shift_invariance():
    spec = ModelSpec("linear", 3, 4)
    x, y = _batch(spec, 8, seed=3)
    p = np.random.default_rng(1).normal(size=spec.num_params)
    shifted = p.reshape(4, 4).copy()
    shifted[:, -1] += 7.5   # same constant added to every logit
    l1, p1, _ = M.forward_loss(spec, p, x, y)
    l2, p2, _ = M.forward_loss(spec, shifted.ravel(), x, y)
    assert abs(l1 - l2) <= 1e-12 and np.array_equal(p1, p2)


def test_loss_decreases_for_small_lr():
    decreases = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        spec = LIN if seed % 2 else HID
        x, y = _batch(spec, 8, seed)
        p = rng.normal(scale=0.5, size=spec.num_params)
        g = M.gradient(spec, p, x, y)
        decreases += M.forward_loss(spec, M.sgd_step(p, g.grad, 1e-3), x, y)[0] < g.mean_loss
    assert decreases >= 95


def test_accuracy_examples():
    spec = ModelSpec("linear", 1, 2)
    x = np.linspace(-1, 1, 10)[:, None]
    y = (x[:, 0] > 0).astype(int)
    # logit_1 - logit_0 = 2x separates the toy set
    assert M.accuracy_top1(spec, np.array([-1.0, 0.0, 1.0, 0.0]), x, y) == 1.0
    assert M.accuracy_top1(LIN, np.zeros(LIN.num_params), np.ones((4, 4)), np.zeros(4, int)) == 1.0
    with pytest.raises(ValueError):
        M.accuracy_top1(LIN, np.zeros(LIN.num_params), np.zeros((0, 4)), np.zeros(0, int))


def test_random_accuracy_near_chance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10000, 4))
    y = rng.integers(0, 5, size=10000)
    acc = M.accuracy_top1(LIN, rng.normal(size=LIN.num_params), x, y)
    assert abs(acc - 0.2) <= 0.02


def test_shape_and_numeric_errors():
    with pytest.raises(ShapeError):
        M.forward_loss(LIN, np.zeros(LIN.num_params), np.zeros((2, 3)), np.zeros(2, int))
    with pytest.raises(ShapeError):
        M.forward_loss(LIN, np.zeros(3), np.zeros((2, 4)), np.zeros(2, int))
    with pytest.raises(NumericError):
        M.forward_loss(LIN, np.full(LIN.num_params, np.nan), np.ones((2, 4)), np.zeros(2, int))
