import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quartznet.errors import ContractError, ShapeError
from quartznet.tensor import (
    Tensor,
    check_gradient,
    elementwise,
    log_softmax,
    mul,
    reduce,
    relu,
    transpose,
)


def test_elementwise_examples():
    np.testing.assert_array_equal(elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    np.testing.assert_array_equal(elementwise("mul", Tensor([1.0, 2.0]), 0).data, [0, 0])
    np.testing.assert_array_equal(elementwise("relu", Tensor([-1.0, 2.0])).data, [0, 2])


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_unknown_op():
    with pytest.raises(ContractError):
        elementwise("pow", Tensor([1.0]), 2)


def test_reduce_examples():
    np.testing.assert_array_equal(reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]), 1).data, [3, 7])
    assert reduce("mean", Tensor([2.0, 4.0])).data == 3
    assert reduce("max", Tensor([-5.0, -2.0])).data == -2


def test_reduce_bad_axis():
    with pytest.raises(ShapeError):
        reduce("sum", Tensor([[1.0]]), 2)


def test_backward_linear():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = (w * Tensor([3.0, 4.0])).sum()
    loss.backward()
    np.testing.assert_array_equal(w.grad, [3, 4])


def test_backward_inactive_relu():
    w = Tensor([1.0], requires_grad=True)
    relu(w * -1).sum().backward()
    np.testing.assert_array_equal(w.grad, [0])


def test_relu_subgradient_at_zero():
    w = Tensor([0.0], requires_grad=True)
    relu(w).sum().backward()
    assert w.grad[0] == 0


def test_backward_accumulates():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = (w * 2.0).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(w.grad, [4, 4])
    w.zero_grad()
    assert w.grad is None


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_shared_subexpression():
    # d/dx (x*x + x) = 2x + 1
    x = Tensor([3.0], requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad[0] == 7.0


def test_channel_broadcast():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = mul(x, b)
    assert out.data[1, 2, 3] == 3.0
    out.sum().backward()
    np.testing.assert_array_equal(b.grad, [8, 8, 8])


def random_graph(x: Tensor) -> Tensor:
    # five ops: mul, add, relu, log_softmax, mean
    a = x * Tensor(np.linspace(-1.5, 1.5, x.size).reshape(x.shape))
    b = a + x * x
    c = relu(b)
    d = log_softmax(c + x, axis=-1)
    return (d * Tensor(np.arange(x.size, dtype=float).reshape(x.shape))).mean()


def test_random_graph_finite_differences(rng):
    for _ in range(5):
        x = rng.uniform(-2, 2, size=(3, 4))
        x[np.abs(x) < 0.05] += 0.1  # keep off the ReLU kink
        assert check_gradient(random_graph, x, h=1e-5) < 1e-6


def test_check_gradient_sum_of_squares():
    assert check_gradient(lambda t: (t * t).sum(), np.array([1.0, 2.0])) < 1e-8


def test_transpose_and_reshape_grads(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 4, 3))

    def f(t):
        return (transpose(t, (0, 2, 1)) * Tensor(w)).sum() + (t.reshape(6, 4) * Tensor(w.reshape(6, 4))).sum()

    assert check_gradient(f, x) < 1e-8


def test_log_softmax_grad(rng):
    w = rng.normal(size=(3, 5))
    for _ in range(20):
        x = rng.uniform(-2, 2, size=(3, 5))
        assert check_gradient(lambda t: (log_softmax(t, -1) * Tensor(w)).sum(), x) < 1e-6


def test_max_grad(rng):
    x = rng.normal(size=(4, 3))
    assert check_gradient(lambda t: reduce("max", t, 0).sum(), x) < 1e-8


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_ops_are_deterministic(x):
    f = lambda: log_softmax(relu(Tensor(x)) * 2.0 + Tensor(x), -1).data
    assert np.array_equal(f(), f())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-2, 2)))
def test_ops_preserve_finiteness(x):
    out = log_softmax(relu(Tensor(x)) + Tensor(x) * Tensor(x), -1)
    assert np.all(np.isfinite(out.data))


def test_float32_preserved():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0).dtype == np.float32
    assert relu(x).dtype == np.float32
