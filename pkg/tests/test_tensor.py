import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynsep import tensor as T
from dynsep.tensor import GradientError, ShapeError, Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_softmax_equal_logits():
    y = T.softmax(Tensor([3.0, 3.0, 3.0, 3.0]))
    np.testing.assert_allclose(y.data, [0.25] * 4, rtol=0, atol=1e-15)


def test_matmul_identity():
    x = np.random.default_rng(0).standard_normal((2, 3))
    y = T.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(y.data, x)


def test_l1_mean_convention_against_loop():
    a = np.array([[1.0, -2.0], [3.0, 0.0]])
    total, count = 0.0, 0
    for row in a:
        for v in row:
            total += abs(v - 0.0)
            count += 1
    loss = T.l1_loss(Tensor(a), Tensor(np.zeros_like(a)))
    assert total == 6.0
    assert loss.item() == pytest.approx(total / count, abs=1e-15)


def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_composite_softmax_matmul_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.standard_normal((3, 3))), leaf(rng.standard_normal((3, 3)))
    weights = Tensor(rng.standard_normal((3, 3)))

    def f(ps):
        return T.sum(T.mul(T.softmax(T.matmul(ps[0], ps[1]), axis=1), weights))

    assert grad_check(f, [a, b]) < 1e-4


def test_grad_check_quadratic_and_constant():
    x = leaf(np.random.default_rng(2).standard_normal(4))
    assert grad_check(lambda t: T.sum(T.mul(t, t)), x) < 1e-6
    assert grad_check(lambda t: T.sum(Tensor(np.ones(3))), x) == 0.0
    assert np.all(x.grad is None or x.grad == 0)


def test_grad_check_rejects_non_finite():
    x = leaf([1.0, 2.0])
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: T.scale(T.sum(t), np.inf), x)


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(GradientError):
        T.backward(T.scale(x, 2.0))  # not scalar
    loss = T.sum(x)
    T.backward(loss)
    with pytest.raises(GradientError):
        T.backward(loss)  # same graph twice
    with pytest.raises(GradientError):
        T.backward(T.sum(x))  # stale leaf gradient
    x.zero_grad()
    T.backward(T.sum(x))


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(ShapeError, match="concat"):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match="softmax"):
        T.softmax(Tensor(np.ones((2, 0))), axis=1)
    with pytest.raises(ShapeError, match="bias_add"):
        T.bias_add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.sum(T.mul(x, x))
    assert not y.requires_grad
    assert T.sum(x).requires_grad


def test_topological_order_parents_first():
    x = leaf([1.0, 2.0])
    y = T.tanh(x)
    z = T.sum(T.add(y, T.mul(y, x)))
    order = T.topological_order(z)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert len(order) == len({id(n) for n in order})


OPS = {
    "add": (((2, 3), (2, 3)), lambda a, b: T.add(a, b)),
    "sub": (((2, 3), (2, 3)), lambda a, b: T.sub(a, b)),
    "mul": (((2, 3), (2, 3)), lambda a, b: T.mul(a, b)),
    "scale": (((2, 3),), lambda a: T.scale(a, np.array([0.5, -2.0, 3.0]))),
    "tanh": (((2, 3),), T.tanh),
    "sigmoid": (((2, 3),), T.sigmoid),
    "matmul": (((2, 2, 3), (3, 4)), T.matmul),
    "bias_add": (((2, 4), (4,)), T.bias_add),
    "softmax": (((3, 4),), lambda a: T.softmax(a, axis=0)),
    "mean": (((3, 4),), lambda a: T.mean(a, axis=1)),
    "sum_axis": (((3, 4),), lambda a: T.sum(a, axis=0)),
    "concat": (((2, 3), (2, 2)), lambda a, b: T.concat([a, b], axis=1)),
    "slice": (((4, 5),), lambda a: T.slice_axis(a, 1, 1, 4)),
    "reshape": (((2, 6),), lambda a: T.reshape(a, (3, 4))),
    "transpose": (((2, 3, 4),), lambda a: T.transpose(a, (2, 0, 1))),
    "broadcast_to": (((2, 1, 3),), lambda a: T.broadcast_to(a, (2, 4, 3))),
    "overlap_add": (((2, 5, 8),), lambda a: T.overlap_add(a, 2)),
    "l1_loss": (((3, 4), (3, 4)), T.l1_loss),
    "gru": (
        ((2, 5, 3), (3, 12), (4, 12), (12,), (12,)),
        lambda x, a, b, c, d: T.gru(x, a, b, c, d),
    ),
    "gru_reverse": (
        ((2, 5, 3), (3, 12), (4, 12), (12,), (12,)),
        lambda x, a, b, c, d: T.gru(x, a, b, c, d, reverse=True),
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    shapes, op = OPS[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        leaves = [leaf(rng.standard_normal(s)) for s in shapes]
        weights = None

        def f(ps):
            nonlocal weights
            y = op(*ps)
            if weights is None:
                weights = rng.standard_normal(y.shape)
            return T.sum(T.mul(y, Tensor(weights))) if y.ndim else y

        assert grad_check(f, leaves) < 1e-4, f"{name} seed {seed}"


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-30, 30)),
       st.integers(0, 1))
def test_softmax_is_a_distribution(x, axis):
    y = T.softmax(Tensor(x), axis=axis).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
def test_concat_then_slice_is_identity(widths, rows):
    rng = np.random.default_rng(sum(widths))
    parts = [Tensor(rng.standard_normal((rows, w))) for w in widths]
    cat = T.concat(parts, axis=1)
    lo = 0
    for p in parts:
        back = T.slice_axis(cat, 1, lo, lo + p.shape[1])
        np.testing.assert_array_equal(back.data, p.data)
        lo += p.shape[1]


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(5)
    x = leaf(rng.standard_normal((3, 4)))
    w = leaf(rng.standard_normal((4, 2)))
    t1, t2 = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((3, 2)))

    def l1():
        return T.l1_loss(T.tanh(T.matmul(x, w)), t1)

    def l2():
        return T.sum(T.mul(T.softmax(T.matmul(x, w), axis=1), t2))

    T.backward(l1())
    g1 = (x.grad.copy(), w.grad.copy())
    T.zero_grad([x, w])
    T.backward(l2())
    g2 = (x.grad.copy(), w.grad.copy())
    T.zero_grad([x, w])
    T.backward(T.add(l1(), l2()))
    np.testing.assert_allclose(x.grad, g1[0] + g2[0], rtol=0, atol=1e-10)
    np.testing.assert_allclose(w.grad, g1[1] + g2[1], rtol=0, atol=1e-10)


def test_every_reachable_tensor_gets_a_gradient():
    rng = np.random.default_rng(6)
    x = leaf(rng.standard_normal((2, 3)))
    unused_path = leaf(rng.standard_normal((2, 3)))
    y = T.add(T.tanh(x), T.scale(unused_path, 0.0))
    loss = T.sum(y)
    T.backward(loss)
    for node in T.topological_order(loss):
        assert node.grad is not None and node.grad.shape == node.shape


def test_float32_is_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    y = T.sum(T.tanh(T.matmul(x, Tensor(np.ones((3, 2), dtype=np.float32)))))
    assert y.dtype == np.float32
    T.backward(y)
    assert x.grad.dtype == np.float32
