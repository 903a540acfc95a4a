import numpy as np
import pytest

from clearcomm import tensor as T
from clearcomm.tensor import Tensor, no_grad, grad_enabled

from helpers import check_grad, fd_grad, rel_err

RNG = np.random.default_rng(7)


def test_mean_square_hand_gradient():
    # loss = mean(x^2) at x = [1, 2] differentiates to x
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = T.mean(T.square(x))
    loss.backward()
    assert np.allclose(x.grad, [1.0, 2.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x + x).backward()


def test_backward_twice_rejected():
    x = Tensor(np.array(3.0), requires_grad=True)
    loss = T.square(x)
    loss.backward()
    with pytest.raises(RuntimeError, match="re-record"):
        loss.backward()


def test_nonfinite_rejected_at_construction():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1.0, np.inf]))


def test_nonfinite_rejected_from_ops():
    x = Tensor(np.array([1.0]))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        T.div(x, Tensor(np.array([0.0])))


def test_no_grad_suppresses_tape():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        loss = T.mean(T.square(x))
    assert grad_enabled()
    assert not loss.requires_grad
    loss.backward()          # scalar leaf; nothing flows upstream
    assert x.grad is None


def test_grad_accumulates_across_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = T.sum_(x * x + x)    # dx = 2x + 1 = 5
    loss.backward()
    assert np.allclose(x.grad, [5.0])


def test_take_scatter_adds_repeated_indices():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = T.sum_(x[np.array([0, 1, 1])])
    loss.backward()
    assert np.allclose(x.grad, [1.0, 2.0, 0.0])


def test_unbroadcast_scalar_plus_matrix():
    s = Tensor(np.array(2.0), requires_grad=True)
    m = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    T.sum_(s + m).backward()
    assert np.allclose(s.grad, 12.0)
    assert np.allclose(m.grad, np.ones((3, 4)))


# -- finite-difference oracle, one primitive at a time ------------------------

def test_fd_add_broadcast():
    check_grad(lambda a, b: T.mean(T.square(a + b)),
               [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])


def test_fd_mul_broadcast():
    check_grad(lambda a, b: T.mean(T.square(a * b)),
               [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 1))])


def test_fd_div():
    b = RNG.uniform(-0.4, 0.4, size=(3, 4))
    check_grad(lambda a, c: T.mean(T.square(a / (c + 2.0))),
               [RNG.normal(size=(3, 4)), b])


def test_fd_square():
    check_grad(lambda a: T.mean(T.square(a)), [RNG.normal(size=(5,))])


def test_fd_sqrt():
    check_grad(lambda a: T.mean(T.sqrt(a + 2.0)),
               [RNG.uniform(-0.5, 0.5, size=(5,))])


def test_fd_relu_away_from_kink():
    x = RNG.normal(size=(4, 4))
    x += np.where(x >= 0, 0.3, -0.3)
    check_grad(lambda a: T.mean(T.square(T.relu(a))), [x])


def test_fd_sigmoid():
    check_grad(lambda a: T.mean(T.square(T.sigmoid(a))),
               [RNG.normal(size=(3, 3))])


def test_fd_clamp_interior_and_exterior():
    # strictly inside passes gradient, strictly outside blocks it
    x = np.array([-2.0, -0.2, 0.1, 0.4, 3.0])
    check_grad(lambda a: T.mean(T.square(T.clamp(a, -0.5, 0.5))), [x])
    t = Tensor(x, requires_grad=True)
    T.sum_(T.clamp(t, -0.5, 0.5)).backward()
    assert np.allclose(t.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_fd_softmax():
    check_grad(lambda a: T.mean(T.square(T.softmax(a, axis=-1))),
               [RNG.normal(size=(2, 5))])


def test_fd_reductions():
    check_grad(lambda a: T.sum_(T.square(T.sum_(a, axis=0))),
               [RNG.normal(size=(3, 4))])
    check_grad(lambda a: T.sum_(T.square(T.mean(a, axis=(0, 2), keepdims=True))),
               [RNG.normal(size=(2, 3, 4))])


def test_fd_reshape_transpose_concat_take():
    check_grad(lambda a: T.mean(T.square(T.reshape(a, (6,)))),
               [RNG.normal(size=(2, 3))])
    check_grad(lambda a: T.mean(T.square(T.transpose(a, (1, 0, 2)))),
               [RNG.normal(size=(2, 3, 2))])
    check_grad(lambda a, b: T.mean(T.square(T.concat([a, b], axis=1))),
               [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 2))])
    key = np.array([0, 2, 2, 1])
    check_grad(lambda a: T.mean(T.square(a[key])), [RNG.normal(size=(4, 3))])


def test_fd_matmul_batched():
    check_grad(lambda a, b: T.mean(T.square(a @ b)),
               [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 4, 2))])


def test_fd_matmul_broadcast_leading_axes():
    check_grad(lambda a, b: T.mean(T.square(a @ b)),
               [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 2))])


def test_softmax_rows_sum_to_one():
    s = T.softmax(Tensor(RNG.normal(size=(6, 9))), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)


def test_fd_grad_helper_sanity():
    # the oracle itself must differentiate a known polynomial correctly
    g = fd_grad(lambda a: float((a ** 3).sum()), np.array([1.0, 2.0]))
    assert rel_err(g, [3.0, 12.0]) < 1e-8
