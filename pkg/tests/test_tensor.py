import numpy as np
import numpy.testing as npt
import pytest

from itt import tensor as T
from itt.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_check,
    no_grad,
    set_default_dtype,
)


def test_dtype_switch():
    assert Tensor([1.0]).data.dtype == np.float32
    set_default_dtype("float64")
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        set_default_dtype("float16")


def test_tensor_rejects_five_axes():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2, 2, 2)))


class TestForwardOps:
    def test_matmul_identity(self, rng):
        a = Tensor(rng.normal(size=(2, 2)))
        out = T.matmul(Tensor(np.eye(2)), a)
        npt.assert_array_equal(out.data, a.data)

    def test_matmul_against_triple_loop(self, f64, rng):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        out = T.matmul(Tensor(a), Tensor(b)).data
        ref = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    ref[i, j] += a[i, k] * b[k, j]
        npt.assert_allclose(out, ref, rtol=1e-6)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_softmax_uniform(self):
        out = T.softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        npt.assert_allclose(out.data, 0.25)

    def test_softmax_shift_invariance(self, f64, rng):
        x = rng.normal(size=(3, 5))
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 1000.0)).data
        npt.assert_allclose(a, b, atol=1e-12)

    def test_add_row_vector_and_mismatch(self, rng):
        x = rng.normal(size=(4, 3)).astype(np.float32)
        v = rng.normal(size=3).astype(np.float32)
        npt.assert_array_equal(T.add(Tensor(x), Tensor(v)).data, x + v)
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(x), Tensor(np.zeros(4, dtype=np.float32)))

    def test_non_finite_flagged(self):
        big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
        with pytest.raises(NonFiniteError, match="add"):
            T.add(big, big)

    def test_rms_norm_scale_and_eps(self, f64):
        x = np.array([[3.0, -4.0]])
        w = np.array([2.0, 2.0])
        out = T.rms_norm(Tensor(x), Tensor(w)).data
        rms = np.sqrt((9 + 16) / 2 + 1e-5)
        npt.assert_allclose(out, x * 2.0 / rms, rtol=1e-12)

    def test_silu_zero(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0

    def test_sigmoid_closed_form(self, f64):
        out = T.sigmoid(Tensor([2.0])).data[0]
        npt.assert_allclose(out, 0.8807970779778823, rtol=1e-12)

    def test_embedding_out_of_range(self):
        table = Tensor(np.zeros((4, 2)))
        with pytest.raises(IndexError, match="embedding"):
            T.embedding(table, [0, 4])

    def test_slice_concat_roundtrip(self, rng):
        x = rng.normal(size=(3, 6)).astype(np.float32)
        t = Tensor(x)
        parts = [T.slice_axis(t, 1, 0, 2), T.slice_axis(t, 1, 2, 6)]
        npt.assert_array_equal(T.concat(parts, axis=1).data, x)

    def test_scatter_gather_shapes(self):
        with pytest.raises(ShapeError, match="scatter_rows"):
            T.scatter_rows(Tensor(np.zeros((2, 3))), [0, 1, 2], 5)
        with pytest.raises(IndexError):
            T.gather_rows(Tensor(np.zeros((2, 3))), [2])


class TestBackward:
    def test_sum_of_squares(self, f64):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        backward(tape, loss)
        npt.assert_allclose(x.grad, [6.0])

    def test_independent_leaf_gets_no_grad(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(c, c))
        backward(tape, loss)
        assert x.grad is None  # zero by convention: untouched leaves stay None

    def test_grad_accumulates_across_uses(self, f64):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(T.mul(x, x), x))  # x^2 + x
        backward(tape, loss)
        npt.assert_allclose(x.grad, [5.0])

    def test_loss_must_be_scalar(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, y)

    def test_backward_twice_errors(self, f64):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(x)
        backward(tape, loss)
        with pytest.raises(RuntimeError, match="consumed"):
            backward(tape, loss)

    def test_random_chain_matches_finite_differences(self, f64, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def fn(ts):
            return T.mean_all(T.silu(T.matmul(T.tanh(ts[0]), ts[1])))

        errs = grad_check(fn, [x, w])
        assert max(errs) < 1e-4

    def test_no_grad_suspends_recording(self, f64):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                T.mul(x, x)
            assert len(tape) == 0


class TestProperties:
    def test_backward_linearity(self, f64, rng):
        # grad(a*f + b*g) == a*grad(f) + b*grad(g)
        x_data = rng.normal(size=(4, 3))
        a, b = 1.7, -0.4

        def grad_of(builder):
            x = Tensor(x_data, requires_grad=True)
            with Tape() as tape:
                loss = builder(x)
            backward(tape, loss)
            return x.grad

        gf = grad_of(lambda x: T.sum_all(T.mul(x, x)))
        gg = grad_of(lambda x: T.sum_all(T.silu(x)))
        combined = grad_of(
            lambda x: T.add(
                T.scale(T.sum_all(T.mul(x, x)), a), T.scale(T.sum_all(T.silu(x)), b)
            )
        )
        npt.assert_allclose(combined, a * gf + b * gg, atol=1e-10)

    def test_gather_scatter_adjoint(self, f64, rng):
        # <gather(x), y> == <x, scatter(y)> including duplicate indices
        for _ in range(20):
            n, d = 6, 3
            k = int(rng.integers(1, 9))
            idx = rng.integers(0, n, size=k)
            x = rng.normal(size=(n, d))
            y = rng.normal(size=(k, d))
            lhs = float((T.gather_rows(Tensor(x), idx).data * y).sum())
            rhs = float((x * T.scatter_rows(Tensor(y), idx, n).data).sum())
            npt.assert_allclose(lhs, rhs, atol=1e-12)

    def test_determinism_bitwise(self, rng):
        x = rng.normal(size=(8, 8)).astype(np.float32)
        w = rng.normal(size=(8, 8)).astype(np.float32)
        a = T.matmul(T.softmax(Tensor(x)), Tensor(w)).data
        b = T.matmul(T.softmax(Tensor(x)), Tensor(w)).data
        assert np.array_equal(a, b)


class TestGradCheck:
    def test_identity_has_zero_error(self, f64):
        # binary-exact point and eps: the central difference is exact
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        errs = grad_check(lambda ts: T.sum_all(ts[0]), [x], eps=2.0**-13)
        assert max(errs) < 1e-12

    def test_rms_norm_at_random_point(self, f64, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=5), requires_grad=True)
        errs = grad_check(lambda ts: T.mean_all(T.rms_norm(ts[0], ts[1])), [x, w])
        assert max(errs) < 1e-4

    def test_nondeterministic_fn_rejected(self, f64):
        x = Tensor([1.0], requires_grad=True)
        state = {"n": 0.0}

        def fn(ts):
            state["n"] += 1.0
            return T.scale(T.sum_all(ts[0]), state["n"])

        with pytest.raises(RuntimeError, match="deterministic"):
            grad_check(fn, [x])
