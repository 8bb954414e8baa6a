import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groundcl import tensor as T


def rand(rng, *shape):
    return T.tensor(rng.normal(size=shape))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- forward values


def test_add_and_scalar_broadcast():
    a = T.tensor(np.ones((2, 3)))
    assert np.array_equal(T.add(a, 2.0).data, np.full((2, 3), 3.0))
    assert np.array_equal((a + np.arange(3.0)).data, np.ones((2, 3)) + np.arange(3.0))


def test_trailing_one_broadcast():
    m = T.tensor(np.full((2, 4, 1), 0.5))
    v = T.tensor(np.ones((2, 4, 3)))
    assert T.mul(m, v).shape == (2, 4, 3)


@pytest.mark.parametrize("a,b", [((2, 3), (3, 2)), ((2, 3), (2,)), ((4, 3), (2, 3))])
def test_incompatible_shapes_raise(a, b):
    with pytest.raises(T.ShapeError) as exc:
        T.add(np.zeros(a), np.zeros(b))
    assert "add" in str(exc.value)


def test_matmul_shapes():
    assert T.matmul(np.ones((5, 2, 3)), np.ones((3, 4))).shape == (5, 2, 4)
    assert T.matmul(np.ones((2, 3)), np.ones((5, 3, 4))).shape == (5, 2, 4)
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_stable_and_normalised():
    x = T.tensor(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))
    s = T.softmax(x).data
    assert np.allclose(s.sum(-1), 1.0)
    assert np.allclose(s[0], 0.5)


def test_sigmoid_extremes_finite():
    s = T.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    assert s[1] == 0.5 and 0.0 <= s[0] < 1e-300 and s[2] == 1.0


def test_log_domain_error():
    with pytest.raises(T.DomainError):
        T.log(np.array([1.0, 0.0]))


def test_non_finite_forward_names_input():
    x = T.tensor(np.array([800.0]), name="logits")
    with pytest.raises(T.NonFiniteError) as exc:
        T.exp(x)
    assert "logits" in str(exc.value)


def test_l2_distance_zero_has_zero_grad():
    a = T.tensor(np.ones(3), requires_grad=True)
    T.backward(T.l2_distance(a, np.ones(3)))
    assert np.array_equal(a.grad, np.zeros(3))


def test_forward_op_dispatch():
    assert np.allclose(T.forward_op("softmax_lastdim", np.zeros(4)).data, 0.25)
    with pytest.raises(ValueError):
        T.forward_op("conv", np.zeros(2))


# ---------------------------------------------------------------- tape semantics


def test_no_grad_records_nothing():
    a = T.tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        T.sum(T.mul(a, a))
    assert len(T.current_tape()) == 0


def test_backward_requires_scalar_and_graph():
    a = T.tensor(np.ones(2), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(a, a))
    T.current_tape().clear()
    with pytest.raises(RuntimeError):
        T.backward(T.tensor(np.array(1.0)))


def test_gradients_accumulate():
    a = T.tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.sum(T.mul(a, a)))
    T.backward(T.sum(T.mul(a, a)))
    assert np.allclose(a.grad, [8.0])


def test_shared_input_used_twice():
    a = T.tensor(np.array([3.0]), requires_grad=True)
    T.backward(T.sum(T.add(T.mul(a, a), a)))
    assert np.allclose(a.grad, [7.0])


# ---------------------------------------------------------------- sgd


def test_sgd_single_step():
    p = T.tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    T.sgd_step([p], 0.1)
    assert np.allclose(p.data, [0.8]) and np.array_equal(p.grad, [0.0])


def test_sgd_zero_lr_is_noop():
    p = T.tensor(np.array([1.5, -2.0]), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    T.sgd_step([p], 0.0)
    assert np.array_equal(p.data, [1.5, -2.0])


def test_sgd_two_steps_on_square():
    # hand iteration of p <- p - 0.1 * 2p from p = 1
    p = T.tensor(np.array([1.0]), requires_grad=True)
    seen = []
    for _ in range(2):
        T.backward(T.sum(T.mul(p, p)))
        T.sgd_step([p], 0.1)
        seen.append(float(p.data[0]))
    assert seen == pytest.approx([0.8, 0.64], abs=1e-15)


def test_sgd_missing_grad():
    with pytest.raises(RuntimeError):
        T.sgd_step([T.tensor(np.ones(1), requires_grad=True)], 0.1)


def test_clip_grad_norm():
    p = T.tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert T.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.allclose(p.grad, [0.6, 0.8])


# ---------------------------------------------------------------- gradient checks

UNARY = {
    "relu": lambda x: T.sum(T.relu(x)),
    "sigmoid": lambda x: T.sum(T.sigmoid(x)),
    "exp": lambda x: T.sum(T.exp(x)),
    "log": lambda x: T.sum(T.log(T.add(T.mul(x, x), 0.5))),
    "softmax": lambda x: T.sum(T.mul(T.softmax(x), np.linspace(-1, 1, x.shape[-1]))),
    "mean_all": lambda x: T.mean(T.mul(x, x)),
    "mean_last": lambda x: T.sum(T.mul(T.mean(x, axis=-1), np.arange(1.0, x.shape[0] + 1))),
    "sum_last": lambda x: T.sum(T.exp(T.sum(x, axis=-1))),
    "scale": lambda x: T.sum(T.mul(T.scale(x, -2.5), x)),
    "reshape": lambda x: T.sum(T.mul(T.reshape(x, (-1,)), np.arange(x.data.size, dtype=float))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_grad_unary(name, rng):
    for _ in range(5):
        x = rand(rng, 3, 4)
        if name == "relu":  # stay away from the kink
            x.data[np.abs(x.data) < 1e-3] = 0.1
        assert T.grad_check(UNARY[name], x) < 1e-4


def test_grad_binary(rng):
    other = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    fns = [
        lambda x: T.sum(T.mul(T.add(x, other), other)),
        lambda x: T.sum(T.mul(T.sub(other, x), x)),
        lambda x: T.sum(T.exp(T.matmul(x, w))),
        lambda x: T.sum(T.mul(T.concat(x, other), np.arange(8.0))),
        lambda x: T.sum(T.mul(T.dot(x, other), T.dot(x, x))),
        lambda x: T.sum(T.l2_distance(x, other)),
    ]
    for f in fns:
        assert T.grad_check(f, rand(rng, 3, 4)) < 1e-4


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        # forward says x^2, the recorded backward says 3x
        return T.sum(T._record("bad", (x,), x.data ** 2, lambda g: (3 * g * x.data,)))

    assert T.grad_check(bad, T.tensor(np.array([1.0, 2.0]))) > 0.4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_add_commutes_and_gradient_is_one(a, b):
    ta = T.tensor(a, requires_grad=True)
    assert np.array_equal(T.add(ta, b).data, T.add(b, ta).data)
    T.backward(T.sum(T.add(ta, b)))
    assert np.array_equal(ta.grad, np.ones_like(a))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-50, 50)))
def test_softmax_shift_invariant(x):
    a = T.softmax(x).data
    b = T.softmax(x + 7.0).data
    assert np.allclose(a, b, atol=1e-12) and math.isclose(a.sum(), 1.0, rel_tol=1e-12)
