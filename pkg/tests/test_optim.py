import math

import numpy as np
import pytest

from stochnorm import tensor as T
from stochnorm.model import init_weights
from stochnorm.optim import (
    DivergenceError,
    Optimizer,
    OptimizerConfig,
    gamma_for,
    lr_search,
    project_unit,
)
from stochnorm.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def _quadratic_step(opt, x):
    opt.zero_grad()
    (0.5 * (x * x).sum()).backward()
    opt.step(0)


def test_quadratic_bowl_contracts_by_one_minus_lr():
    x0 = np.array([1.0, -2.0, 0.5])
    x = Tensor(x0.copy(), requires_grad=True)
    lr = 0.1
    opt = Optimizer({"x": x}, OptimizerConfig(lr0=lr, momentum=0.0))
    for t in range(1, 6):
        _quadratic_step(opt, x)
        np.testing.assert_allclose(x.data, x0 * (1 - lr) ** t, rtol=1e-14)


def test_nesterov_matches_reference_recursion():
    x = Tensor(np.array([1.0]), requires_grad=True)
    lr, mu = 0.1, 0.9
    opt = Optimizer({"x": x}, OptimizerConfig(lr0=lr, momentum=mu))
    ref, buf = 1.0, 0.0
    for _ in range(10):
        _quadratic_step(opt, x)
        g = ref
        buf = mu * buf + g
        ref -= lr * (g + mu * buf)
        assert x.data[0] == pytest.approx(ref, rel=1e-14)


def test_adam_first_step_is_lr_sign():
    x = Tensor(np.array([3.0, -0.2]), requires_grad=True)
    opt = Optimizer({"x": x}, OptimizerConfig(kind="adam", lr0=0.01))
    _quadratic_step(opt, x)
    np.testing.assert_allclose(x.data, [3.0 - 0.01, -0.2 + 0.01], atol=1e-9)


def test_projection_keeps_unit_norm(rng):
    w = project_unit(rng.standard_normal((4, 3, 3, 3)))
    p = Tensor(w, requires_grad=True)
    opt = Optimizer({"w": p}, OptimizerConfig(lr0=0.5, projected={"w"}))
    for _ in range(50):
        opt.zero_grad()
        g = rng.standard_normal(w.shape)
        flat = g.reshape(4, -1)
        wf = p.data.reshape(4, -1)
        flat -= (flat * wf).sum(axis=1, keepdims=True) * wf  # tangent
        p.grad = flat.reshape(w.shape)
        opt.step(0)
        norms = np.linalg.norm(p.data.reshape(4, -1), axis=1)
        assert np.all(np.abs(norms - 1) < 1e-7)


def test_schedule_tenth_at_600():
    cfg = OptimizerConfig(lr0=0.3, gamma=gamma_for(600))
    opt = Optimizer({}, cfg)
    assert opt.lr(600) == pytest.approx(0.03, rel=1e-12)
    assert opt.lr(0) == 0.3
    assert gamma_for(None) == 1.0


@pytest.mark.parametrize(
    "kwargs", [dict(lr0=0.0), dict(gamma=0.0), dict(gamma=1.5), dict(momentum=1.0), dict(kind="rmsprop")]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs)


def test_nonfinite_gradient_halts():
    x = Tensor(np.array([1.0]), requires_grad=True)
    x.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="x"):
        Optimizer({"x": x}, OptimizerConfig()).step(0)


def test_lr_search_quadratic_oracle():
    a = 4.0  # f = a x^2 / 2, optimal GD step 1/a

    def five_epochs(lr):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Optimizer({"x": x}, OptimizerConfig(lr0=lr, momentum=0.0))
        for _ in range(5):
            opt.zero_grad()
            (0.5 * a * (x * x)).sum().backward()
            opt.step(0)
        loss = 0.5 * a * x.data[0] ** 2
        if not math.isfinite(loss) or loss > 1e6:
            raise DivergenceError("diverged")
        return loss

    grid = np.logspace(-3, 0, 13)
    best = lr_search(five_epochs, grid)
    cell = np.log10(grid[1] / grid[0])
    assert abs(np.log10(best) - np.log10(1 / a)) <= cell


def test_lr_search_single_and_all_diverging():
    assert lr_search(lambda lr: 1.0, [0.07]) == 0.07
    with pytest.raises(DivergenceError):
        lr_search(lambda lr: float("nan"), [0.1, 0.2])


def test_init_weights_range_and_variance(rng):
    w = init_weights((8, 4), rng)
    assert np.all(np.abs(w) <= 0.5)
    big = init_weights((100_000, 4), rng)
    assert big.var() == pytest.approx(0.25 / 3, rel=0.05)
    np.testing.assert_array_equal(init_weights((3, 2), np.random.default_rng(1)), init_weights((3, 2), np.random.default_rng(1)))
    with pytest.raises(ValueError):
        init_weights((3, 0), rng)


def test_unprojected_scale_invariant_norm_grows(rng):
    x = rng.standard_normal(6)
    c = rng.standard_normal(6)
    w = Tensor(rng.standard_normal((1, 6)), requires_grad=True)
    opt = Optimizer({"w": w}, OptimizerConfig(lr0=0.5, momentum=0.0))
    prev = np.linalg.norm(w.data)
    for _ in range(30):
        opt.zero_grad()
        v = w / T.sqrt(T.reduce_sum(w * w))
        loss = T.reduce_sum((T.matmul(v, Tensor(np.diag(x))) - Tensor(c[None])) ** 2)
        loss.backward()
        g = w.grad.copy()
        assert abs(np.sum(g * w.data)) < 1e-10 * max(1.0, np.linalg.norm(g))
        opt.step(0)
        norm = np.linalg.norm(w.data)
        assert norm**2 == pytest.approx(prev**2 + 0.25 * np.sum(g * g), rel=1e-10)
        assert norm >= prev
        prev = norm


def test_bit_level_determinism():
    def trajectory(seed):
        r = np.random.default_rng(seed)
        w = Tensor(r.standard_normal((3, 4)), requires_grad=True)
        opt = Optimizer({"w": w}, OptimizerConfig(lr0=0.05, projected={"w"}))
        for _ in range(120):
            opt.zero_grad()
            x = Tensor(r.standard_normal((8, 3)))
            (T.matmul(x, w) ** 2).sum().backward()
            opt.step(0)
        return w.data.copy()

    assert np.array_equal(trajectory(5), trajectory(5))
    assert not np.array_equal(trajectory(5), trajectory(6))


def test_state_roundtrip():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Optimizer({"x": x}, OptimizerConfig(lr0=0.1))
    _quadratic_step(opt, x)
    saved = opt.state_arrays()
    opt2 = Optimizer({"x": x}, OptimizerConfig(lr0=0.1))
    opt2.load_state_arrays(saved, opt.t)
    np.testing.assert_array_equal(opt2.state["x"]["momentum"], opt.state["x"]["momentum"])
