import numpy as np
import pytest

from clearcomm import tensor as T
from clearcomm.tensor import Tensor
from clearcomm.optim import ParamSet, adam_step, backward


def test_zero_gradient_leaves_params_unchanged():
    ps = ParamSet()
    ps.add("w", np.array([1.0, -2.0]))
    adam_step(ps, {"w": np.zeros(2)}, lr=0.1)
    assert np.array_equal(ps["w"].data, [1.0, -2.0])


def test_adam_first_step_hand_values():
    # g=1, lr=0.1: m_hat = v_hat = 1 after bias correction, update ~ -0.1
    ps = ParamSet()
    ps.add("w", np.array(0.0))
    adam_step(ps, {"w": np.array(1.0)}, lr=0.1)
    assert np.isclose(ps["w"].data, -0.1, atol=1e-8)
    m, v, step = ps.adam_state("w")
    assert step == 1
    assert np.isclose(m, 0.1)
    assert np.isclose(v, 0.001)


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(3)
        ps = ParamSet()
        w = ps.add("w", rng.normal(size=(4,)))
        for _ in range(100):
            ps.zero_grad()
            loss = T.mean(T.square(w - Tensor(np.array([1.0, 2.0, 3.0, 4.0]))))
            grads = backward(loss, ps)
            adam_step(ps, grads, lr=0.05)
        return ps["w"].data.copy()

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_adam_converges_on_quadratic():
    ps = ParamSet()
    w = ps.add("w", np.array([5.0, -5.0]))
    target = Tensor(np.array([1.0, 2.0]))
    for _ in range(400):
        ps.zero_grad()
        loss = T.mean(T.square(w - target))
        adam_step(ps, backward(loss, ps), lr=0.05)
    assert np.allclose(ps["w"].data, [1.0, 2.0], atol=1e-2)


def test_nonfinite_gradient_aborts_naming_parameter():
    ps = ParamSet()
    ps.add("encoder.w0", np.zeros(3))
    with pytest.raises(FloatingPointError, match="encoder.w0"):
        adam_step(ps, {"encoder.w0": np.array([1.0, np.nan, 0.0])}, lr=0.1)


def test_unreachable_parameter_gets_zero_gradient():
    ps = ParamSet()
    used = ps.add("used", np.array([2.0]))
    ps.add("unused", np.array([7.0]))
    grads = backward(T.mean(T.square(used)), ps)
    assert np.allclose(grads["used"], [4.0])
    assert np.array_equal(grads["unused"], [0.0])


def test_duplicate_name_rejected():
    ps = ParamSet()
    ps.add("w", np.zeros(1))
    with pytest.raises(ValueError, match="duplicate"):
        ps.add("w", np.zeros(1))


def test_adam_state_load_validation():
    ps = ParamSet()
    ps.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        ps.load_adam_state("w", np.zeros(3), np.zeros(3), 1)
    with pytest.raises(ValueError, match="step"):
        ps.load_adam_state("w", np.zeros((2, 2)), np.zeros((2, 2)), -1)
    ps.load_adam_state("w", np.ones((2, 2)), np.ones((2, 2)), 5)
    m, v, step = ps.adam_state("w")
    assert step == 5 and np.all(m == 1.0) and np.all(v == 1.0)


def test_subset_prefix_filtering():
    ps = ParamSet()
    a = ps.add("enc.w", np.zeros(1))
    b = ps.add("enc.b", np.zeros(1))
    ps.add("dec.w", np.zeros(1))
    assert ps.subset("enc.") == [a, b]
    assert len(ps) == 3
    assert "dec.w" in ps and "dec.x" not in ps
