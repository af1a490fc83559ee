import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqc import autodiff as ad
from vqc.gradcheck import central_difference, relative_error


def fd_check(build, *arrays, tol=1e-5):
    """Compare backward against central differences for loss = build(*nodes)."""
    nodes = [ad.parameter(a) for a in arrays]
    loss = build(*nodes)
    ad.backward(loss)
    for node in nodes:
        num = central_difference(lambda: float(build(*[ad.constant(n.value) for n in nodes]).value), node.value)
        assert np.all(relative_error(num, node.grad, floor=1e-6) < tol), (num, node.grad)


def test_add_values_and_grad():
    a, b = ad.parameter([1.0, 2.0]), ad.parameter([3.0, 4.0])
    out = ad.add(a, b)
    np.testing.assert_array_equal(out.value, [4.0, 6.0])
    ad.backward(ad.sum(out))
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_square_scalar():
    x = ad.parameter(3.0)
    y = ad.square(x)
    ad.backward(y)
    assert y.value == 9.0
    assert x.grad == 6.0


def test_scalar_array_broadcast_only():
    x = ad.parameter(np.ones((2, 3)))
    ad.add(x, 2.0)
    with pytest.raises(ad.ShapeError):
        ad.add(x, np.ones(3))


def test_sqrt_negative_raises():
    with pytest.raises(ValueError):
        ad.sqrt(ad.parameter([-1.0]))


def test_composite_expression_finite_differences():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4))

    def build(x, y):
        z = ad.div(ad.mul(ad.sub(x, ad.neg(y)), ad.tanh(x)), ad.sqrt(ad.add(ad.square(y), 1.0)))
        return ad.sum(ad.mul(ad.sigmoid(z), z))
    fd_check(build, a, b)


def test_matmul_known_product():
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.value, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity():
    v = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ad.matmul(ad.constant(np.eye(3)), ad.constant(v)).value, v)


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    fd_check(lambda a, b: ad.sum(ad.square(ad.matmul(a, b))), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_activation_values():
    x = ad.parameter(0.0)
    y = ad.tanh(x)
    ad.backward(y)
    assert y.value == 0.0 and x.grad == 1.0
    x = ad.parameter(0.0)
    y = ad.sigmoid(x)
    ad.backward(y)
    assert y.value == 0.5 and x.grad == 0.25


def test_relu_gradient_away_from_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=20)
    x[np.abs(x) < 0.05] = 0.5
    fd_check(lambda a: ad.sum(ad.mul(ad.relu(a), a)), x)


def test_reductions():
    x = ad.parameter(np.ones(4))
    s = ad.sum(x)
    ad.backward(s)
    assert s.value == 4.0
    np.testing.assert_array_equal(x.grad, np.ones(4))
    x = ad.parameter(np.arange(5.0))
    ad.backward(ad.mean(x))
    np.testing.assert_allclose(x.grad, np.full(5, 0.2))


def test_concat_slice_inverse():
    a = ad.parameter(np.arange(6.0).reshape(2, 3))
    b = ad.parameter(np.arange(4.0).reshape(2, 2))
    c = ad.concat([a, b], axis=1)
    np.testing.assert_array_equal(ad.slice(c, 0, 3, axis=1).value, a.value)
    np.testing.assert_array_equal(ad.slice(c, 3, 5, axis=1).value, b.value)
    with pytest.raises(IndexError):
        ad.slice(c, 4, 7, axis=1)
    with pytest.raises(IndexError):
        ad.sum(c, axis=2)


def test_structural_ops_gradient():
    rng = np.random.default_rng(4)

    def build(a, b, bias):
        c = ad.concat([a, ad.square(b)], axis=1)
        d = ad.add_rowvec(ad.slice(c, 1, 4, axis=1), bias)
        return ad.sum(ad.mul(ad.mean(ad.tanh(d), axis=0), ad.constant([1.0, -2.0, 3.0])))
    fd_check(build, rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.normal(size=3))


def test_batch_matvec_and_take_columns_gradient():
    rng = np.random.default_rng(5)

    def build(A, v, table):
        picked = ad.take_columns(table, np.array([2, 0, 2]))
        return ad.sum(ad.square(ad.add(ad.batch_matvec(A, v), picked)))
    fd_check(build, rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 2)), rng.normal(size=(4, 3)))


def test_stop_gradient_identity_and_zero():
    x = ad.parameter([1.0, 2.0, 3.0])
    sg = ad.stop_gradient(x)
    np.testing.assert_array_equal(sg.value, [1.0, 2.0, 3.0])
    loss = ad.sum(ad.mul(sg, 2.0))
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_straight_through_identity():
    x = ad.parameter([0.3, -1.2, 2.0])
    loss = ad.sum(ad.sub(x, ad.stop_gradient(x)))
    ad.backward(loss)
    assert loss.value == 0.0
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_stop_gradient_zeroes_whole_subgraph():
    rng = np.random.default_rng(6)
    w = ad.parameter(rng.normal(size=(3, 3)))
    x = ad.parameter(rng.normal(size=(2, 3)))
    inner = ad.tanh(ad.matmul(x, w))
    other = ad.parameter(rng.normal(size=(2, 3)))
    ad.backward(ad.sum(ad.mul(ad.stop_gradient(inner), other)))
    assert np.all(w.grad == 0.0) and np.all(x.grad == 0.0)
    assert np.any(other.grad != 0.0)


def test_backward_requires_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.parameter([1.0, 2.0]))


def test_backward_leaf_and_chain():
    x = ad.parameter(2.5)
    ad.backward(x)
    assert x.grad == 1.0
    x = ad.parameter([1.0, 2.0])
    ad.backward(ad.sum(ad.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates():
    x = ad.parameter([1.0, 2.0])
    loss = ad.sum(ad.square(x))
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_shared_node_visited_once():
    x = ad.parameter(1.5)
    y = ad.square(x)
    loss = ad.add(ad.mul(y, y), y)        # y**2 + y = x**4 + x**2
    ad.backward(loss)
    assert x.grad == pytest.approx(4 * 1.5 ** 3 + 2 * 1.5, rel=1e-14)


def test_sibling_order_independence():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 3))
    grads = []
    for order in ((0, 1, 2), (2, 0, 1), (1, 2, 0)):
        x = ad.parameter(a)
        branches = [ad.sum(ad.tanh(x)), ad.sum(ad.square(ad.sigmoid(x))), ad.mean(ad.mul(x, x))]
        total = branches[order[0]]
        for k in order[1:]:
            total = ad.add(total, branches[k])
        ad.backward(total)
        grads.append(x.grad)
    for g in grads[1:]:
        np.testing.assert_allclose(g, grads[0], rtol=0, atol=1e-12)


UNARY = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "square": ad.square}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), op=st.sampled_from(sorted(UNARY) + ["mul", "div", "matmul", "sqrt"]))
def test_ops_match_finite_differences(seed, op):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3))
    b = rng.uniform(0.5, 1.5, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3))
    weights = ad.constant(rng.normal(size=(2, 3)))
    if op in UNARY:
        fd_check(lambda x: ad.sum(ad.mul(UNARY[op](x), weights)), a)
    elif op == "sqrt":
        fd_check(lambda x: ad.sum(ad.mul(ad.sqrt(x), weights)), np.abs(b))
    elif op == "matmul":
        fd_check(lambda x, y: ad.sum(ad.tanh(ad.matmul(x, y))), a, rng.normal(size=(3, 2)))
    else:
        fn = ad.mul if op == "mul" else ad.div
        fd_check(lambda x, y: ad.sum(ad.mul(fn(x, y), weights)), a, b)


def test_every_op_matches_finite_differences():
    from vqc.gradcheck import op_gradchecks
    errs = op_gradchecks(seed=3)
    assert len(errs) >= 20
    assert max(errs.values()) < 1e-4, errs
