import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mung import tensor as T
from mung.tensor import DimensionError, NumericalError, Tensor, grad_check


def leaf(rng, *shape, name=None):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def test_add_and_sum_example():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    y = T.sum(T.add(a, b))
    assert y.item() == 10.0
    y.backward()
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_matmul_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor(np.eye(2))
    y = T.sum(T.matmul(a, b))
    assert y.item() == 10.0
    y.backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
    assert b.grad is None


def test_softmax_of_equal_logits_is_uniform():
    out = T.softmax(Tensor(np.zeros((2, 5))))
    np.testing.assert_allclose(out.data, 0.2)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[3, 2\]"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_finite_raises():
    with pytest.raises(NumericalError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericalError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NumericalError):
        Tensor([np.nan])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.add(leaf(np.random.default_rng(0), 3), leaf(np.random.default_rng(1), 3)).backward()


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        T.take_rows(Tensor(np.zeros((4, 2))), np.array([1, 4]))


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        T.cross_entropy_logits(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_layernorm_rejects_width_one_and_bad_eps():
    g, b = Tensor(np.ones(1)), Tensor(np.zeros(1))
    with pytest.raises(DimensionError):
        T.layernorm(Tensor(np.zeros((3, 1))), g, b)
    with pytest.raises(ValueError):
        T.layernorm(Tensor(np.zeros((3, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_no_grad_records_nothing():
    a = leaf(np.random.default_rng(0), 3)
    with T.no_grad():
        y = T.sum(T.exp(a))
    assert not y.requires_grad
    with pytest.raises(ValueError):
        y.backward()


def test_leaf_gradients_accumulate_across_backward_calls():
    a = leaf(np.random.default_rng(0), 3)
    T.sum(T.square(a)).backward()
    first = a.grad.copy()
    T.sum(T.square(a)).backward()
    np.testing.assert_allclose(a.grad, 2 * first)


def test_shared_subexpression_visited_once():
    a = leaf(np.random.default_rng(0), 4)
    e = T.exp(a)
    y = T.sum(T.hadamard(e, e))
    y.backward()
    np.testing.assert_allclose(a.grad, 2 * np.exp(2 * a.data))


# ---------------------------------------------------------------- finite-difference oracles

OPS = {
    "add": lambda r: (lambda a, b: T.sum(T.square(T.add(a, b))), [leaf(r, 3, 4), leaf(r, 3, 4)]),
    "sub": lambda r: (lambda a, b: T.sum(T.square(T.sub(a, b))), [leaf(r, 3, 4), leaf(r, 3, 4)]),
    "hadamard": lambda r: (lambda a, b: T.sum(T.hadamard(a, b)), [leaf(r, 5), leaf(r, 5)]),
    "exp": lambda r: (lambda a: T.sum(T.exp(a)), [leaf(r, 2, 3)]),
    "log": lambda r: (lambda a: T.sum(T.log(T.add_scalar(T.square(a), 1.0))), [leaf(r, 2, 3)]),
    "gelu": lambda r: (lambda a: T.sum(T.square(T.gelu(a))), [leaf(r, 7)]),
    "tanh": lambda r: (lambda a: T.sum(T.tanh(a)), [leaf(r, 7)]),
    "relu": lambda r: (lambda a: T.sum(T.square(T.relu(a))), [leaf(r, 7)]),
    "clamp": lambda r: (lambda a: T.sum(T.square(T.clamp(a, -0.5, 0.5))), [leaf(r, 9)]),
    "matmul": lambda r: (lambda a, b: T.sum(T.square(T.matmul(a, b))), [leaf(r, 2, 3, 4), leaf(r, 4, 5)]),
    "batched_matmul": lambda r: (lambda a, b: T.sum(T.matmul(a, b)), [leaf(r, 2, 3, 4), leaf(r, 2, 4, 2)]),
    "broadcast_to": lambda r: (lambda a: T.sum(T.square(T.broadcast_to(a, (3, 1, 4)))), [leaf(r, 1, 4)]),
    "transpose": lambda r: (lambda a: T.sum(T.hadamard(T.transpose(a, (1, 0, 2)), T.transpose(a, (1, 0, 2)))),
                            [leaf(r, 2, 3, 2)]),
    "narrow": lambda r: (lambda a: T.sum(T.square(T.narrow(a, 1, 1, 3))), [leaf(r, 2, 4)]),
    "concat": lambda r: (lambda a, b: T.sum(T.square(T.concat([a, b], axis=1))), [leaf(r, 2, 3), leaf(r, 2, 1)]),
    "take_rows": lambda r: (lambda a: T.sum(T.square(T.take_rows(a, np.array([[0, 2], [2, 2]])))), [leaf(r, 3, 2)]),
    "mean": lambda r: (lambda a: T.sum(T.square(T.mean(a, axis=0))), [leaf(r, 4, 3)]),
    "softmax": lambda r: (lambda a: T.sum(T.square(T.softmax(a))), [leaf(r, 3, 5)]),
    "layernorm": lambda r: (lambda x, g, b: T.sum(T.square(T.layernorm(x, g, b))), [leaf(r, 3, 6), leaf(r, 6), leaf(r, 6)]),
    "cross_entropy": lambda r: (lambda a: T.sum(T.cross_entropy_logits(a, np.array([[1, 0], [3, 2]]))), [leaf(r, 2, 2, 4)]),
    "masked_fill": lambda r: (lambda a: T.sum(T.softmax(T.masked_fill(a, np.array([True, False, False]), -1e9))),
                              [leaf(r, 2, 3)]),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradients_match_finite_differences(op):
    f, inputs = OPS[op](np.random.default_rng(1))
    rep = grad_check(lambda: f(*inputs), inputs)
    assert rep.passed, rep.to_dict()
    assert rep.max_rel_error < 1e-5


def test_grad_check_detects_a_wrong_adjoint():
    a = leaf(np.random.default_rng(0), 4)

    def bad_square(x):
        return T._make(x.data**2, (x,), lambda g: T._acc(x, g * x.data), "bad")

    rep = grad_check(lambda: T.sum(bad_square(a)), [a])
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.5, rel=1e-3)


def test_grad_check_flags_frozen_input_that_matters():
    w = Tensor(np.ones(3), requires_grad=False, name="w")
    x = leaf(np.random.default_rng(0), 3)
    rep = grad_check(lambda: T.sum(T.hadamard(w, x)), [w, x])
    assert not rep.passed and rep.worst[0] == "w"


# ---------------------------------------------------------------- properties

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=floats), arrays(np.float64, (3, 4), elements=floats),
       st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_is_linear_in_the_loss(x, w, alpha, beta):
    def grad_of(f):
        t = Tensor(x, requires_grad=True)
        f(t).backward()
        return t.grad

    f1 = lambda t: T.sum(T.hadamard(T.tanh(t), Tensor(w)))  # noqa: E731
    f2 = lambda t: T.sum(T.square(t))  # noqa: E731
    combo = grad_of(lambda t: T.add(T.scale(f1(t), alpha), T.scale(f2(t), beta)))
    np.testing.assert_allclose(combo, alpha * grad_of(f1) + beta * grad_of(f2), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=floats), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4, 3), elements=floats))
def test_backward_is_deterministic(x):
    grads = []
    for _ in range(2):
        t = Tensor(x, requires_grad=True)
        T.sum(T.square(T.layernorm(t, Tensor(np.ones(3)), Tensor(np.zeros(3))))).backward()
        grads.append(t.grad.tobytes())
    assert grads[0] == grads[1]
