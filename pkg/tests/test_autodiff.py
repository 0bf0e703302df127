import numpy as np
import pytest

from splitleak.autodiff import (
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    backward,
    finite_difference_gradient,
    jvp,
    jvp_fn,
    ops,
    relative_error,
)

from _programs import programs


def _grad(fn, inputs):
    g = Graph()
    xs = [g.leaf(x) for x in inputs]
    out = fn(xs)
    return out, xs, backward(out, xs)


class TestPrimitiveExamples:
    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_matmul_identity(self):
        m = np.random.default_rng(1).normal(size=(3, 3))
        np.testing.assert_array_equal(ops.matmul(np.eye(3), m).data, m)

    def test_soft_cross_entropy_with_one_hot_is_hard(self):
        z = np.array([0.3, -1.2, 2.0, 0.1])
        y = np.eye(4)[2]
        lp = z - np.log(np.exp(z).sum())
        assert ops.cross_entropy_soft(z, y).item() == pytest.approx(-lp[2], abs=1e-15)
        assert ops.cross_entropy_hard(z[None], [2]).item() == pytest.approx(-lp[2], abs=1e-15)

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            ops.matmul(np.ones((2, 3)), np.ones((4, 5)))
        with pytest.raises(ShapeError, match="add"):
            ops.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_gather_index_error(self):
        with pytest.raises(IndexError):
            ops.embedding(np.ones((4, 2)), [0, 4])

    def test_unrecorded_inputs_produce_plain_tensor(self):
        out = ops.add(np.ones(3), np.ones(3))
        assert out.node is None

    def test_recorded_input_records_result(self):
        g = Graph()
        x = g.leaf(np.ones(3))
        out = ops.scale(x, 2.0)
        assert out.node is not None and len(g) == 2

    def test_suffix_broadcast(self):
        g = Graph()
        x = g.leaf(np.ones((2, 3, 4)))
        b = g.leaf(np.arange(4.0))
        gx, gb = backward(ops.sum(ops.add(x, b)), [x, b])
        np.testing.assert_array_equal(gb, np.full(4, 6.0))
        np.testing.assert_array_equal(gx, np.ones((2, 3, 4)))


class TestBackward:
    def test_sum_of_squares(self):
        g = Graph()
        x = g.leaf([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(backward(ops.sum(ops.mul(x, x)), x), [2.0, 4.0, 6.0])

    def test_constant_loss_gives_zero(self):
        g = Graph()
        x = g.leaf([1.0, 2.0])
        c = g.leaf(3.0)
        np.testing.assert_array_equal(backward(ops.scale(c, 2.0), x), [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            backward(ops.scale(x, 2.0), x)

    def test_mapping_structure_is_preserved(self):
        g = Graph()
        p = g.leaves({"a": np.ones(2), "b": np.ones(2)})
        grads = backward(ops.sum(ops.mul(p["a"], p["b"])), p)
        assert set(grads) == {"a", "b"}

    def test_accumulates_over_reuse(self):
        g = Graph()
        x = g.leaf(np.array([1.5]))
        y = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
        np.testing.assert_allclose(backward(ops.sum(y), x), [2 * 1.5 + 3.0])

    @pytest.mark.parametrize("name,fn,inputs", programs(13, seed=7), ids=lambda v: v if isinstance(v, str) else "")
    def test_matches_finite_differences(self, name, fn, inputs):
        _, _, grads = _grad(fn, inputs)
        for i, x in enumerate(inputs):

            def f(xi, i=i):
                args = list(inputs)
                args[i] = xi
                return fn([Tensor(a) for a in args]).item()

            fd = finite_difference_gradient(f, x, 1e-5)
            assert relative_error(grads[i], fd, floor=1e-6) < 1e-4, name

    def test_determinism(self):
        for name, fn, inputs in programs(13, seed=3):
            out1, _, g1 = _grad(fn, inputs)
            out2, _, g2 = _grad(fn, inputs)
            assert out1.data.tobytes() == out2.data.tobytes()
            for a, b in zip(g1, g2):
                assert a.tobytes() == b.tobytes(), name


class TestJVP:
    def test_linear_map(self):
        _, t = jvp_fn(lambda x: ops.scale(x, 3.0), [np.array([1.0, -2.0])], [np.array([0.5, 2.0])])
        np.testing.assert_array_equal(t, [1.5, 6.0])

    def test_square(self):
        _, t = jvp_fn(lambda x: ops.mul(x, x), [np.array(2.0)], [np.array(1.0)])
        assert float(t) == 4.0

    def test_softmax_against_finite_difference(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=8)
        v = rng.normal(size=8)
        _, t = jvp_fn(ops.softmax, [x], [v])
        h = 1e-6

        def sm(z):
            e = np.exp(z - z.max())
            return e / e.sum()

        fd = (sm(x + h * v) - sm(x - h * v)) / (2 * h)
        assert relative_error(t, fd, floor=1e-8) < 1e-6

    def test_tangent_shape_checked(self):
        g = Graph()
        x = g.leaf(np.ones(3))
        y = ops.scale(x, 2.0)
        with pytest.raises(ShapeError):
            jvp(y, [(x, np.ones(4))])

    def test_unsupported_op_is_named(self):
        from splitleak.autodiff import UnsupportedOpError
        from splitleak.autodiff.tensor import record

        g = Graph()
        x = g.leaf(np.ones(2))
        y = record("mystery", x.data * 2, (x,), lambda gr: (gr * 2,), None)
        with pytest.raises(UnsupportedOpError, match="mystery"):
            jvp(y, [(x, np.ones(2))])

    @pytest.mark.parametrize("name,fn,inputs", programs(13, seed=11), ids=lambda v: v if isinstance(v, str) else "")
    def test_reverse_forward_consistency(self, name, fn, inputs):
        rng = np.random.default_rng(5)
        g = Graph()
        xs = [g.leaf(x) for x in inputs]
        out = fn(xs)
        grads = backward(out, xs)
        for _ in range(10):
            vs = [rng.normal(size=x.shape) for x in inputs]
            lhs = sum(float((gr * v).sum()) for gr, v in zip(grads, vs))
            rhs = float(jvp(out, list(zip(xs, vs))))
            assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs), abs(rhs)), name


class TestInvariants:
    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(2).normal(size=(50, 17)) * 30
        np.testing.assert_allclose(ops.softmax(x).data.sum(-1), 1.0, atol=1e-12)

    def test_soft_cross_entropy_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            z = rng.normal(size=(3, 9)) * 5
            y = rng.random((3, 9))
            y /= y.sum(-1, keepdims=True)
            assert ops.cross_entropy_soft(z, y).item() >= 0

    def test_label_gradient_is_negative_log_softmax(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(1, 6))
        g = Graph()
        y = g.leaf(np.full((1, 6), 1 / 6))
        grad = backward(ops.cross_entropy_soft(z, y), y)
        lp = z - np.log(np.exp(z).sum())
        np.testing.assert_allclose(grad, -lp, atol=1e-14)

    def test_finite_difference_helpers(self):
        np.testing.assert_allclose(finite_difference_gradient(np.sum, np.array([1.0, 5.0, -2.0]), 1e-3), np.ones(3), atol=1e-10)
        fd = finite_difference_gradient(lambda v: float(v @ v), np.array([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(fd, [2.0, 4.0], atol=1e-8)
        with pytest.raises(ValueError):
            finite_difference_gradient(np.sum, np.ones(2), 0.0)
