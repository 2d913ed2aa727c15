import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftlab import nn
from driftlab.errors import DimensionError, ParameterError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# -- losses: worked examples --------------------------------------------------


def test_mse_identity_is_zero():
    p = np.arange(6.0).reshape(2, 3)
    val, grad = nn.mse_loss(p, p.copy())
    assert val == 0.0
    assert not grad.any()


def test_mse_unit_displacement():
    val, grad = nn.mse_loss([[1.0, 0.0]], [[0.0, 0.0]])
    assert val == 1.0
    np.testing.assert_array_equal(grad, [[2.0, 0.0]])


def test_mse_matches_elementwise_loop():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    total = 0.0
    for i in range(4):
        for j in range(3):
            total += (p[i, j] - t[i, j]) ** 2
    assert nn.mse_loss(p, t)[0] == pytest.approx(total / 4, rel=1e-14)


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_cross_entropy_uniform_is_log_c():
    val, _ = nn.cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert val == pytest.approx(math.log(4), abs=1e-12)
    assert val == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_dominant_logit():
    logits = np.array([[100.0, 0.0, 0.0]])
    assert nn.cross_entropy(logits, np.array([0]))[0] == pytest.approx(0.0, abs=1e-40)


def test_cross_entropy_matches_logsumexp():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 5))
    y = np.array([4, 0, 2])
    expected = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, y)])
    assert nn.cross_entropy(z, y)[0] == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_distill_self_equals_teacher_entropy():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 3))
    val, grad = nn.distill_ce(z, z, 2.0)
    p = nn.softmax(z / 2.0)
    entropy = -np.sum(p * np.log(p)) / 4
    assert val == pytest.approx(entropy, rel=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_distill_high_temperature_tends_to_log_c():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    assert nn.distill_ce(a, b, 1e6)[0] == pytest.approx(math.log(5), abs=1e-6)


def test_distill_matches_direct_formula():
    rng = np.random.default_rng(4)
    t, s = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    total = 0.0
    for tr, sr in zip(t, s):
        pt = [math.exp(v / 2) for v in tr]
        ps = [math.exp(v / 2) for v in sr]
        total -= sum(a / sum(pt) * math.log(b / sum(ps)) for a, b in zip(pt, ps))
    assert nn.distill_ce(t, s, 2.0)[0] == pytest.approx(total / 2, rel=1e-12)


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_distill_rejects_non_positive_temperature(temp):
    with pytest.raises(ParameterError):
        nn.distill_ce(np.zeros((1, 2)), np.zeros((1, 2)), temp)


# -- optimizers -----------------------------------------------------------------


def test_sgd_zero_gradient_keeps_params():
    w = np.array([1.0, -2.0])
    nn.SGD([w], lr=0.5).step([np.zeros(2)])
    np.testing.assert_array_equal(w, [1.0, -2.0])


def test_sgd_single_step():
    w = np.array([3.0])
    nn.SGD([w], lr=0.1).step([np.array([1.0])])
    assert w[0] == pytest.approx(2.9, abs=1e-15)


def test_sgd_momentum_recurrence():
    w = np.array([0.0])
    opt = nn.SGD([w], lr=1.0, momentum=0.5)
    for _ in range(3):
        opt.step([np.array([1.0])])
    # buffers 1, 1.5, 1.75
    assert w[0] == pytest.approx(-4.25)
    assert opt.step_count == 3


def test_adam_quadratic_hand_recurrence():
    w = np.array([1.0])
    opt = nn.Adam([w], lr=0.1)
    m = v = 0.0
    ref = 1.0
    mags = [abs(w[0])]
    for k in range(1, 11):
        g = 2 * w[0]
        opt.step([np.array([g])])
        gr = 2 * ref
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        ref -= 0.1 * (m / (1 - 0.9**k)) / (math.sqrt(v / (1 - 0.999**k)) + 1e-8)
        assert w[0] == pytest.approx(ref, rel=1e-12)
        mags.append(abs(w[0]))
    assert all(b < a for a, b in zip(mags, mags[1:]))


def test_optimizer_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.SGD([np.zeros(2)], lr=0.1).step([np.zeros(3)])
    with pytest.raises(DimensionError):
        nn.Adam([np.zeros((2, 2))]).step([np.zeros(2)])


# -- gradient checks ----------------------------------------------------------


def _module_check(module, x, rng):
    """Compare analytic and finite-difference gradients of sum(r * module(x))."""
    r = rng.normal(size=module.apply(x).shape)

    def f():
        return float(np.sum(r * module.apply(x)))

    module.forward(x)
    gx = module.backward(r)
    errs = [nn.relative_error(gx, nn.numerical_gradient(f, x))]
    for p, g in zip(module.params, module.grads):
        errs.append(nn.relative_error(g, nn.numerical_gradient(f, p)))
    return max(errs)


def _make(kind, d_in, d_out, rng):
    if kind == "linear":
        return nn.Linear(d_in, d_out, rng=rng)
    if kind == "linear_nobias":
        return nn.Linear(d_in, d_out, bias=False, rng=rng)
    if kind == "relu":
        return nn.ReLU()
    if kind == "mlp":
        return nn.mlp([d_in, 6, d_out], rng)
    inner = nn.Sequential(nn.Linear(d_in, 5, rng=rng), nn.ReLU(), nn.Linear(5, d_in, rng=rng))
    return nn.Residual(inner)


def _min_preactivation(module, x):
    """Smallest |input| seen by any ReLU; finite differences are invalid near 0."""
    if isinstance(module, nn.ReLU):
        return float(np.abs(x).min())
    if isinstance(module, nn.Residual):
        return _min_preactivation(module.inner, x)
    if isinstance(module, nn.Sequential):
        best = np.inf
        for layer in module.layers:
            best = min(best, _min_preactivation(layer, x))
            x = layer.apply(x)
        return best
    return np.inf


MODULE_KINDS = ["linear", "linear_nobias", "relu", "mlp", "residual"]


@pytest.mark.parametrize("kind", MODULE_KINDS)
def test_module_gradients(kind):
    rng = np.random.default_rng(MODULE_KINDS.index(kind))
    checked = 0
    while checked < 20:
        n, d_in, d_out = rng.integers(1, 9, size=3)
        x = rng.normal(size=(n, d_in))
        module = _make(kind, d_in, d_out, rng)
        if _min_preactivation(module, x) < 1e-3:
            continue
        assert _module_check(module, x, rng) < 1e-4
        checked += 1


@pytest.mark.parametrize("loss", ["mse", "ce", "kd"])
def test_loss_gradients(loss):
    rng = np.random.default_rng({"mse": 0, "ce": 1, "kd": 2}[loss])
    for _ in range(20):
        n, c = rng.integers(1, 9), rng.integers(2, 9)
        z = rng.normal(size=(n, c))
        if loss == "mse":
            t = rng.normal(size=(n, c))
            fn = lambda: nn.mse_loss(z, t)[0]
            g = nn.mse_loss(z, t)[1]
        elif loss == "ce":
            y = rng.integers(0, c, size=n)
            fn = lambda: nn.cross_entropy(z, y)[0]
            g = nn.cross_entropy(z, y)[1]
        else:
            t, temp = rng.normal(size=(n, c)), rng.uniform(0.5, 4)
            fn = lambda: nn.distill_ce(t, z, temp)[0]
            g = nn.distill_ce(t, z, temp)[1]
        assert nn.relative_error(g, nn.numerical_gradient(fn, z)) < 1e-4


# -- properties ---------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(z):
    p = nn.softmax(z)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_training_steps_are_deterministic(seed, k):
    def run():
        rng = np.random.default_rng(seed)
        net = nn.mlp([4, 5, 3], rng)
        opt = nn.SGD(net.params, lr=0.05, momentum=0.9)
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
        for _ in range(k):
            _, g = nn.cross_entropy(net.forward(x), y)
            net.backward(g)
            opt.step(net.grads)
        return [p.copy() for p in net.params]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_mse_value_matches_gradient_scale(p):
    t = np.zeros_like(p)
    val, grad = nn.mse_loss(p, t)
    assert val >= 0
    np.testing.assert_allclose(grad, 2 * p / len(p))


def test_build_module_round_trip():
    rng = np.random.default_rng(5)
    net = nn.mlp([3, 4, 2], rng)
    twin = nn.build_module(net.describe())
    assert twin.describe() == net.describe()
    assert [p.shape for p in twin.params] == [p.shape for p in net.params]


def test_apply_does_not_touch_backward_cache():
    rng = np.random.default_rng(6)
    lin = nn.Linear(3, 2, rng=rng)
    x1, x2 = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    lin.forward(x1)
    lin.apply(x2)
    lin.backward(np.ones((4, 2)))
    np.testing.assert_allclose(lin.grads[0], np.ones((2, 4)) @ x1)
