import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cassle.autograd import (
    OPS,
    Tensor,
    add,
    backward,
    center,
    concat,
    exp,
    finite_difference_gradient,
    forward,
    gradcheck,
    graph_nodes,
    l2_normalize,
    log,
    logsumexp,
    matmul,
    mean,
    numerical_gradients,
    relu,
    slice_,
    sqrt,
    standardize,
    sum_,
)
from cassle.errors import ContractError, DegenerateInputError, DomainError, ShapeError


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_add(self):
        np.testing.assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_matmul_identity(self):
        m = np.random.default_rng(0).standard_normal((3, 3))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_dispatch_by_name(self):
        out = forward("add", Tensor([1.0]), Tensor([2.0]))
        assert out.data.tolist() == [3.0]
        assert {"add", "matmul", "exp", "log", "relu", "sum", "mean", "concat", "slice"} <= set(OPS)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    @pytest.mark.parametrize("fn, arg", [(log, [0.0]), (log, [-1.0]), (sqrt, [-1.0]), (exp, [1e4])])
    def test_domain_errors(self, fn, arg):
        with pytest.raises(DomainError):
            fn(Tensor(arg))

    def test_divide_by_zero(self):
        with pytest.raises(DomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            forward("nope", Tensor([1.0]))


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        grads = backward(x * x)
        assert grads[x] == 6.0
        assert x.grad == 6.0

    def test_sum_matmul_matches_fd(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        grads = backward(sum_(a @ b))
        num = numerical_gradients(lambda: sum_(a @ b), [a, b])
        for t in (a, b):
            np.testing.assert_allclose(grads[t], num[t], rtol=1e-6, atol=1e-9)
        # closed form: d/dA sum(AB) = 1 B^T
        np.testing.assert_allclose(grads[a], np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-12)

    def test_constant_loss_gives_empty_map(self):
        c = Tensor([1.0, 2.0])
        assert backward(sum_(c * c)) == {}

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_accumulates_into_grad(self):
        x = leaf(2.0)
        backward(x * 3.0)
        backward(x * 3.0)
        assert x.grad == 6.0

    def test_shared_subexpression(self):
        x = leaf(1.5)
        y = x * x
        grads = backward(y + y * y)  # d/dx (x^2 + x^4) = 2x + 4x^3
        assert grads[x] == pytest.approx(2 * 1.5 + 4 * 1.5 ** 3, rel=1e-12)

    def test_detach_blocks_gradient(self):
        x = leaf([1.0, 2.0])
        grads = backward(sum_(x * x.detach()))
        np.testing.assert_array_equal(grads[x], [1.0, 2.0])

    def test_graph_is_topological(self):
        x = leaf([1.0, 2.0])
        loss = sum_(relu(x) * 2.0)
        nodes = graph_nodes(loss)
        assert nodes[0] is x and nodes[-1] is loss
        assert graph_nodes(Tensor(1.0)) == []

    def test_deep_chain_does_not_recurse(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = y * 1.0
        assert backward(y)[x] == 1.0

    def test_slice_fancy_index_accumulates(self):
        x = leaf([1.0, 2.0, 3.0])
        grads = backward(sum_(slice_(x, np.array([0, 0, 2]))))
        np.testing.assert_array_equal(grads[x], [2.0, 0.0, 1.0])

    def test_sqrt_gradient_at_zero_is_an_error(self):
        x = leaf([0.0])
        with pytest.raises(DomainError):
            backward(sum_(sqrt(x)))


class TestFiniteDifferences:
    def test_square(self):
        g = finite_difference_gradient(lambda x: x * x, leaf(3.0), h=1e-5)
        assert abs(float(next(iter(g.values()))) - 6.0) < 1e-6

    def test_constant_function(self):
        x = leaf([1.0, 2.0])
        g = finite_difference_gradient(lambda _: Tensor(5.0), x)
        np.testing.assert_array_equal(g[x], [0.0, 0.0])

    def test_normalize_dot_matches_backward(self):
        rng = np.random.default_rng(2)
        x = leaf(rng.standard_normal(5))
        v = rng.standard_normal(5)
        ok, worst = gradcheck(lambda: sum_(l2_normalize(x, axis=0) * v), [x])
        assert ok, worst

    def test_bad_step(self):
        with pytest.raises(DomainError):
            numerical_gradients(lambda: Tensor(0.0), [leaf([1.0])], h=0.0)

    @pytest.mark.parametrize("op", ["add", "mul", "div", "matmul", "exp", "log", "relu", "pow2",
                                    "sqrt", "mean", "sum", "concat", "transpose", "logsumexp",
                                    "standardize", "center"])
    def test_primitive_gradcheck(self, op):
        rng = np.random.default_rng(sum(map(ord, op)))
        a = leaf(rng.uniform(0.5, 2.0, (4, 3)))
        b = leaf(rng.uniform(0.5, 2.0, (4, 3)))
        w = rng.standard_normal((4, 3))
        fns = {
            "add": lambda: a + b, "mul": lambda: a * b, "div": lambda: a / b,
            "matmul": lambda: a @ b.T, "exp": lambda: exp(a), "log": lambda: log(a),
            "relu": lambda: relu(a - 1.25), "pow2": lambda: a * a, "sqrt": lambda: sqrt(a),
            "mean": lambda: mean(a, axis=0, keepdims=True) * b,
            "sum": lambda: sum_(a, axis=1, keepdims=True) * b,
            "concat": lambda: concat([a, b], axis=0)[:4] * 2.0 + concat([a, b], axis=1)[:, 3:],
            "transpose": lambda: a.T @ b, "logsumexp": lambda: logsumexp(a, axis=1),
            "standardize": lambda: standardize(a, 0), "center": lambda: center(a, 0) * b,
        }
        fn = fns[op]

        def loss():
            out = fn()
            weights = w if out.shape == w.shape else np.ones(out.shape)
            return sum_(out * weights)

        ok, worst = gradcheck(loss, [a, b])
        assert ok, worst


class TestNormalizations:
    def test_l2_normalize_345(self):
        np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0]), axis=0).data, [0.6, 0.8], atol=1e-15)

    def test_unit_vector_fixed_point(self):
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(Tensor(u), axis=0).data, u)

    def test_random_batch_unit_rows(self):
        z = np.random.default_rng(3).standard_normal((8, 4))
        norms = np.linalg.norm(l2_normalize(Tensor(z), axis=1).data, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-9)

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor(np.zeros((2, 3))), axis=1)

    def test_standardize_two_points(self):
        out = standardize(Tensor([[1.0], [3.0]]), 0).data
        np.testing.assert_allclose(out[:, 0], [-1.0, 1.0], atol=1e-8)

    def test_standardize_idempotent(self):
        z = standardize(Tensor(np.random.default_rng(4).standard_normal((16, 8))), 0).data
        np.testing.assert_allclose(standardize(Tensor(z), 0).data, z, atol=1e-9)

    def test_standardize_moments(self):
        out = standardize(Tensor(np.random.default_rng(5).standard_normal((16, 8))), 0).data
        assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
        assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-6)

    @pytest.mark.parametrize("z", [np.ones((1, 3)), np.ones((4, 3))])
    def test_standardize_degenerate(self, z):
        with pytest.raises(DegenerateInputError):
            standardize(Tensor(z), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_backward_of_linear_form_is_its_weights(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((rows, cols)))
    w = rng.standard_normal((rows, cols))
    np.testing.assert_array_equal(backward(sum_(x * w))[x], w)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_logsumexp_matches_math(values):
    out = logsumexp(Tensor(np.array([values])), axis=1).data[0]
    m = max(values)
    assert out == pytest.approx(m + math.log(math.fsum(math.exp(v - m) for v in values)), abs=1e-12)
