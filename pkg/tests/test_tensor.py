import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from minimtl import tensor as tn
from minimtl.tensor import Tensor
from minimtl.verify import mlp_loss, op_graph


def test_relu_definition():
    out = tn.forward("relu", Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_of_equal_logits_is_uniform():
    out = tn.forward("softmax_rows", Tensor([[0.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[0.5, 0.5]])


def test_matmul_hand_example():
    out = tn.forward("matmul", Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    grads = tn.backward((x * x).sum())
    assert grads[x][0] == 6.0


def test_sigmoid_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    grads = tn.backward(tn.sigmoid(x))
    assert grads[x] == 0.25


def test_backward_twice_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    root = (x * x).sum()
    tn.backward(root)
    tn.backward(root)
    np.testing.assert_array_equal(x.grad, 2 * 2 * x.data)


def test_backward_without_accumulate_leaves_grad_alone():
    x = Tensor([1.0], requires_grad=True)
    g = tn.backward((x * 5.0).sum(), accumulate=False)
    assert x.grad is None or not np.any(x.grad)
    assert g[x][0] == 5.0


def test_trace_is_topological():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 1)), requires_grad=True)
    root = tn.sigmoid(x @ w).sum() + x.sum()
    order = tn.trace(root)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node.parents:
            assert pos[id(p)] < pos[id(node)]
    assert order[-1] is root


def test_finite_diff_linear_function_exact():
    x = Tensor(np.random.default_rng(0).standard_normal(7))
    assert tn.finite_diff_check(lambda p: p.sum(), x) < 1e-12


def test_finite_diff_exp_at_zero():
    err = tn.finite_diff_check(lambda p: tn.exp(p).sum(), Tensor([0.0]), step=1e-4)
    assert err < 1e-8


def test_finite_diff_mlp_loss():
    f, theta = mlp_loss()
    assert tn.finite_diff_check(f, Tensor(theta), step=1e-4) < 1e-5


@pytest.mark.parametrize("kind", tn.OP_KINDS)
def test_every_op_kind_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(10):
        f, x0 = op_graph(kind, rng)
        assert tn.finite_diff_check(f, Tensor(x0)) < 1e-5


def test_log_clamps_instead_of_producing_inf():
    x = Tensor([0.0, 1.0], requires_grad=True)
    out = tn.log(x)
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == np.log(tn.LOG_FLOOR)
    g = tn.backward(out.sum(), accumulate=False)[x]
    assert g[0] == 0.0 and g[1] == 1.0


def test_softmax_large_logits_stay_finite():
    out = tn.softmax_rows(Tensor([[1000.0, 0.0], [-1000.0, -1000.0]]))
    np.testing.assert_allclose(out.data, [[1.0, 0.0], [0.5, 0.5]])


def test_shape_mismatch_raises():
    with pytest.raises(tn.ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(tn.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_data_is_read_only():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_unknown_op_kind():
    with pytest.raises(ValueError):
        tn.forward("conv2d", Tensor([1.0]))


vectors = arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3))


@settings(max_examples=50, deadline=None)
@given(vectors, st.floats(-4, 4), st.floats(-4, 4))
def test_backward_is_linear(xv, a, b):
    x = Tensor(xv, requires_grad=True)
    f = lambda: tn.tanh(x).sum()
    g = lambda: (x * x).sum()
    gf = tn.backward(f(), accumulate=False)[x]
    gg = tn.backward(g(), accumulate=False)[x]
    combo = tn.backward(f() * a + g() * b, accumulate=False)[x]
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_forward_and_backward_bit_identical(xv):
    def run():
        x = Tensor(xv, requires_grad=True)
        w = Tensor(np.linspace(-1, 1, 8).reshape(4, 2), requires_grad=True)
        root = tn.log_softmax_rows(tn.relu(x @ w)).mean()
        g = tn.backward(root, accumulate=False)
        return root.data, g[x], g[w]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
