import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochnorm import tensor as T
from stochnorm.tensor import Tensor, gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_zero_gives_zero_grad_to_b(rng):
    a = Tensor(np.zeros((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    out = T.matmul(a, b)
    out.sum().backward()
    assert np.all(out.data == 0)
    assert np.all(b.grad == 0)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck(rng):
    for _ in range(20):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        c = rng.standard_normal((4, 2))
        assert gradcheck(lambda x, y: (T.matmul(x, y) * Tensor(c)).sum(), [a, b]) < 1e-6


def test_conv_1x1_equals_matmul(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((6, 3, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w)).data
    expected = np.einsum("kchw,oc->kohw", x, w[:, :, 0, 0])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3, 3))
    for k in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[k, o, i, j] = np.sum(xp[k, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_output_size_stride2():
    out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradcheck(rng, stride, pad):
    for _ in range(20):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        probe = None

        def f(a, b):
            nonlocal probe
            out = T.conv2d(a, b, stride, pad)
            if probe is None:
                probe = rng.standard_normal(out.shape)
            return (out * Tensor(probe)).sum()

        assert gradcheck(f, [x, w]) < 1e-5


def test_leaky_relu_values():
    x = Tensor([-1.0, 5.0, 0.0], requires_grad=True)
    y = T.leaky_relu(x, 0.01)
    np.testing.assert_allclose(y.data, [-0.01, 5.0, 0.0])
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [0.01, 1.0, 1.0])


def test_leaky_relu_grad_at_minus_two():
    x = Tensor([-2.0], requires_grad=True)
    T.leaky_relu(x, 0.01).sum().backward()
    assert x.grad[0] == pytest.approx(0.01)


def test_leaky_relu_gradcheck(rng):
    for _ in range(20):
        x = rng.standard_normal(7)
        x[np.abs(x) < 1e-3] += 0.1  # keep away from the kink
        c = rng.standard_normal(7)
        assert gradcheck(lambda a: (T.leaky_relu(a, 0.01) * Tensor(c)).sum(), [x]) < 1e-6


def test_log_softmax_uniform():
    out = T.log_softmax(Tensor(np.zeros((3, 10))))
    np.testing.assert_allclose(out.data, np.log(0.1))


def test_log_softmax_stable():
    out = T.log_softmax(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[0.0, -1000.0]], atol=1e-12)


def test_log_softmax_rows_normalized(rng):
    out = T.log_softmax(Tensor(rng.standard_normal((5, 4)) * 10))
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0)


def test_log_softmax_nll_gradcheck(rng):
    for _ in range(20):
        x = rng.standard_normal((4, 5))
        y = rng.integers(0, 5, 4)
        assert gradcheck(lambda a: T.nll_loss(T.log_softmax(a), y), [x]) < 1e-6


def test_nll_label_out_of_range():
    with pytest.raises(ValueError):
        T.nll_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_var_conventions():
    assert T.reduce_var(Tensor(np.full(5, 3.0))).item() == 0.0
    assert T.reduce_var(Tensor([0.0, 2.0])).item() == pytest.approx(1.0)


def test_empty_reduction_dims():
    with pytest.raises(ValueError):
        T.reduce_sum(Tensor(np.ones(3)), ())


def test_composite_centered_square_gradcheck(rng):
    for _ in range(20):
        x = rng.standard_normal(6)
        assert gradcheck(lambda a: T.reduce_mean((a - T.reduce_mean(a)) ** 2), [x]) < 1e-5


def test_reductions_gradcheck(rng):
    for _ in range(20):
        x = rng.standard_normal((3, 2, 4, 4))
        c = rng.standard_normal((2,))
        f = lambda a: (T.reduce_var(a, (0, 2, 3)) * Tensor(c)).sum() + (T.reduce_mean(a, (0, 2, 3)) * Tensor(c)).sum()
        assert gradcheck(f, [x]) < 1e-5
        g = lambda a: (T.avg_pool2d(a, 2) ** 2).sum()
        assert gradcheck(g, [x]) < 1e-5


@pytest.mark.parametrize(
    "op",
    [
        lambda a: T.exp(a * 0.3).sum(),
        lambda a: T.log(a * a + 1.0).sum(),
        lambda a: T.sqrt(a * a + 0.5).sum(),
        lambda a: (T.normal_cdf(a) * T.normal_pdf(a)).sum(),
        lambda a: (T.piecewise_sigma(a) ** 2).sum(),
        lambda a: (a / (a * a + 2.0)).sum(),
        lambda a: (T.concat([a, a * 2.0]) ** 2).sum(),
        lambda a: (a[1:3] ** 3).sum(),
    ],
)
def test_elementwise_gradcheck(rng, op):
    for _ in range(20):
        x = rng.standard_normal(5)
        x[np.abs(x) < 1e-3] += 0.1  # piecewise_sigma joint
        assert gradcheck(op, [x]) < 1e-5


def test_reused_tensor_accumulates():
    x = Tensor([2.0, -1.0], requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * np.array([2.0, -1.0]) + 3.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ops_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))

    def run():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = T.log_softmax(T.global_avg_pool(T.leaky_relu(T.conv2d(xt, wt, 1, 1))))
        T.nll_loss(out, np.array([0, 1])).backward()
        return out.data, xt.grad, wt.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_float32_option():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    assert x.grad.dtype == np.float32
