import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msedf import autodiff as ad
from msedf.autodiff import DimensionError, Tape, Tensor, backward, finite_difference_check


def param(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def grad_of(fn, *xs):
    with Tape() as tape:
        loss = fn(*xs)
    backward(tape, loss)
    return [x.grad for x in xs]


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), x).values, x.values)

    def test_inner_product(self):
        assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).item() == 11

    def test_gradient(self):
        a, b = param([[1, 1]]), Tensor([[2], [5]])
        (ga,) = grad_of(lambda a: ad.sum_all(ad.matmul(a, b)), a)
        np.testing.assert_allclose(ga, [[2, 5]], atol=1e-12)
        assert finite_difference_check(lambda: ad.sum_all(ad.matmul(a, b)), [a]) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_hadamard(self):
        out = ad.elementwise("hadamard", Tensor([[1, 2, 3]]), Tensor([[4, 5, 6]]))
        np.testing.assert_array_equal(out.values, [[4, 10, 18]])

    def test_additive_identity(self):
        x = Tensor([[1.5, -2.0]])
        np.testing.assert_array_equal(ad.elementwise("add", x, Tensor(np.zeros((1, 2)))).values, x.values)

    def test_hadamard_gradient(self):
        a, b = param([[1, 1]]), Tensor([[7, 9]])
        (ga,) = grad_of(lambda a: ad.sum_all(a * b), a)
        np.testing.assert_allclose(ga, [[7, 9]])

    def test_sub(self):
        a, b = param([[3.0, 1.0]]), param([[1.0, 5.0]])
        ga, gb = grad_of(lambda a, b: ad.sum_all(a - b), a, b)
        np.testing.assert_array_equal(ga, [[1, 1]])
        np.testing.assert_array_equal(gb, [[-1, -1]])

    def test_no_broadcast(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones((2, 2))), Tensor(np.ones((1, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.elementwise("div", Tensor([[1]]), Tensor([[1]]))


class TestConcat:
    def test_values(self):
        np.testing.assert_array_equal(ad.concat([Tensor([[1]]), Tensor([[2]])]).values, [[1, 2]])
        parts = [Tensor([[1, 2]]), Tensor([[3, 4]]), Tensor([[5, 6]])]
        np.testing.assert_array_equal(ad.concat(parts).values, [[1, 2, 3, 4, 5, 6]])

    def test_gradient_routes_ones(self):
        a, b = param([[1, 2]]), param([[3, 4, 5]])
        ga, gb = grad_of(lambda a, b: ad.sum_all(ad.concat([a, b])), a, b)
        np.testing.assert_array_equal(ga, np.ones((1, 2)))
        np.testing.assert_array_equal(gb, np.ones((1, 3)))

    def test_row_axis(self):
        a, b = param([[1, 2]]), param([[3, 4]])
        w = Tensor([[1, 2], [3, 4]])
        ga, gb = grad_of(lambda a, b: ad.sum_all(ad.concat([a, b], axis=0) * w), a, b)
        np.testing.assert_array_equal(ga, [[1, 2]])
        np.testing.assert_array_equal(gb, [[3, 4]])


class TestActivations:
    def test_fixed_points(self):
        zero = Tensor([[0.0]])
        assert ad.activation("sigmoid", zero).item() == 0.5
        assert ad.activation("tanh", zero).item() == 0.0
        assert ad.activation("gelu", zero).item() == 0.0

    def test_gelu_derivative_at_one(self):
        x = param([[1.0]])
        (g,) = grad_of(lambda x: ad.sum_all(ad.gelu(x)), x)
        h = 1e-5
        f = lambda v: ad.gelu(Tensor([[v]])).item()
        assert abs(g[0, 0] - (f(1 + h) - f(1 - h)) / (2 * h)) < 1e-6

    def test_sigmoid_extremes_finite(self):
        out = ad.sigmoid(Tensor([[-1000.0, 1000.0]])).values
        np.testing.assert_array_equal(out, [[0.0, 1.0]])

    @given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
    @settings(max_examples=25, deadline=None)
    def test_activation_gradients(self, v):
        x = param(v)
        for kind in ("sigmoid", "tanh", "gelu"):
            assert finite_difference_check(lambda: ad.sum_all(ad.activation(kind, x) * ad.activation(kind, x)), [x]) < 1e-6


class TestSoftmax:
    def test_symmetry_and_shift(self):
        np.testing.assert_allclose(ad.softmax(Tensor([[0.0, 0.0]])).values, [[0.5, 0.5]])
        for c in (-50.0, 3.0, 700.0):
            np.testing.assert_allclose(ad.softmax(Tensor([[c] * 4])).values, [[0.25] * 4])

    def test_stable(self):
        out = ad.softmax(Tensor([[1000.0, 0.0]])).values
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one(self, v):
        out = ad.softmax(Tensor(v)).values
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0)

    def test_gradient_both_axes(self, rng):
        x = param(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(3, 4)))
        for axis in (0, 1):
            assert finite_difference_check(lambda: ad.sum_all(ad.softmax(x, axis) * w), [x]) < 1e-8


class TestBackward:
    def test_sum(self):
        x = param([[1, 2, 3]])
        (g,) = grad_of(ad.sum_all, x)
        np.testing.assert_array_equal(g, [[1, 1, 1]])

    def test_square(self):
        x = param([[2.0]])
        (g,) = grad_of(lambda x: ad.sum_all(x * x), x)
        np.testing.assert_array_equal(g, [[4.0]])

    def test_rejects_non_scalar(self):
        x = param([[1.0, 2.0]])
        with Tape() as tape:
            y = x * x
        with pytest.raises(ValueError):
            backward(tape, y)

    def test_gradients_accumulate_across_calls(self):
        x = param([[3.0]])
        for _ in range(2):
            with Tape() as tape:
                loss = ad.sum_all(x * x)
            backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [[12.0]])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [[0.0]])

    def test_no_tape_no_recording(self):
        x = param([[1.0]])
        y = x * x
        with Tape() as tape:
            pass
        assert len(tape) == 0
        assert y.values[0, 0] == 1.0

    def test_shared_subexpression(self):
        x = param([[1.5, -0.5]])
        f = lambda: ad.sum_all(ad.tanh(x) * ad.tanh(x) + x)
        assert finite_difference_check(f, [x]) < 1e-8


class TestIndexing:
    def test_take_rows_scatter(self):
        table = param(np.arange(12.0).reshape(4, 3))
        (g,) = grad_of(lambda t: ad.sum_all(ad.take_rows(t, [3, 1, 3])), table)
        expected = np.zeros((4, 3))
        expected[1] = 1
        expected[3] = 2
        np.testing.assert_array_equal(g, expected)

    def test_rows_and_row(self, rng):
        x = param(rng.normal(size=(4, 2)))
        w = Tensor(rng.normal(size=(2, 2)))
        f = lambda: ad.sum_all(ad.rows(x, 1, 3) * w) + ad.sum_all(ad.row(x, 0))
        assert finite_difference_check(f, [x]) < 1e-9

    def test_weighted_sum(self, rng):
        parts = [param(rng.normal(size=(2, 3))) for _ in range(3)]
        w = param(rng.normal(size=(1, 3)))
        m = Tensor(rng.normal(size=(2, 3)))
        f = lambda: ad.sum_all(ad.weighted_sum(parts, w) * m)
        expected = sum(w.values[0, i] * parts[i].values for i in range(3))
        np.testing.assert_allclose(ad.weighted_sum(parts, w).values, expected, atol=1e-14)
        assert finite_difference_check(f, parts + [w]) < 1e-9

    def test_row_ops(self, rng):
        x, r = param(rng.normal(size=(3, 2))), param(rng.normal(size=(1, 2)))
        f = lambda: ad.sum_all(ad.mul_row(ad.add_row(x, r), r))
        assert finite_difference_check(f, [x, r]) < 1e-9


class TestNll:
    def test_uniform(self):
        probs = ad.softmax(Tensor(np.zeros((1, 5))))
        assert ad.nll(probs, [2], [1.0]).item() == pytest.approx(np.log(5))

    def test_zero_weight_rows_ignored(self, rng):
        logits = param(rng.normal(size=(3, 4)))
        with Tape() as tape:
            loss = ad.nll(ad.softmax(logits), [1, 2, 0], [1.0, 1.0, 0.0])
        backward(tape, loss)
        np.testing.assert_array_equal(logits.grad[2], 0.0)

    def test_clamp(self):
        assert np.isfinite(ad.nll(Tensor([[1.0, 0.0]]), [1], [1.0]).item())


class TestFiniteDifference:
    def test_linear_exact(self, rng):
        W, x = param(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(1, 3)))
        assert finite_difference_check(lambda: ad.sum_all(ad.matmul(x, W)), [W]) < 1e-10

    def test_quadratic_form(self, rng):
        A = rng.normal(size=(3, 3))
        A = A + A.T
        x = param(rng.normal(size=(1, 3)))
        At = Tensor(A)
        f = lambda: ad.sum_all(ad.matmul(x, At) * x)
        with Tape() as tape:
            loss = f()
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.values @ A, atol=1e-12)
        assert finite_difference_check(f, [x]) < 1e-9

    def test_detects_wrong_gradient(self, monkeypatch):
        x = param([[0.3, -0.7]])
        real = ad.tanh

        def bad_tanh(t):
            out = real(t)
            return ad._emit(out.values, (t,), lambda g: (g,))  # pretends d tanh = 1

        monkeypatch.setattr(ad, "tanh", bad_tanh)
        assert finite_difference_check(lambda: ad.sum_all(ad.tanh(x)), [x]) > 1e-2

    def test_non_finite_names_parameter(self):
        x = Tensor([[np.inf]], requires_grad=True, name="weird")
        with pytest.raises(FloatingPointError, match="weird"):
            finite_difference_check(lambda: ad.sum_all(x * x), {"weird": x})
