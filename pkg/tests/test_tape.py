import numpy as np
import pytest

from se3fm.errors import NumericError
from se3fm.tape import Tape


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, n_params, seed=0, tol=1e-6):
    """FD-validate the gradient of a scalar built from one flat param vector."""
    rng = np.random.default_rng(seed)
    flat = rng.normal(size=n_params)

    def value():
        tape = Tape()
        return float(build(tape, flat).value)

    tape = Tape()
    loss = build(tape, flat)
    grad = tape.backward(loss, n_params)
    fd = numeric_grad(value, flat)
    assert np.abs(grad - fd).max() < tol, np.abs(grad - fd).max()


class TestOps:
    def test_matmul_add(self):
        def build(tape, flat):
            x = tape.param(flat, 0, (4, 3))
            w = tape.param(flat, 12, (3, 5))
            b = tape.param(flat, 27, (5,))
            return tape.sum_all(tape.add(tape.matmul(x, w), b))

        check_op(build, 32)

    def test_batched_matmul(self):
        def build(tape, flat):
            x = tape.param(flat, 0, (2, 4, 3))
            w = tape.param(flat, 24, (3, 5))
            y = tape.matmul(x, w)
            return tape.sum_all(tape.mul(y, y))

        check_op(build, 39)

    def test_gelu(self):
        def build(tape, flat):
            x = tape.param(flat, 0, (7,))
            return tape.sum_all(tape.gelu(x))

        check_op(build, 7)

    def test_layernorm(self):
        def build(tape, flat):
            x = tape.param(flat, 0, (3, 6))
            g = tape.param(flat, 18, (6,))
            b = tape.param(flat, 24, (6,))
            y = tape.layernorm(x, g, b)
            return tape.sum_all(tape.mul(y, y))

        check_op(build, 30, tol=1e-5)

    def test_concat_and_split_grads(self):
        def build(tape, flat):
            a = tape.param(flat, 0, (2, 3))
            b = tape.param(flat, 6, (2, 2))
            y = tape.concat([a, b])
            return tape.sum_all(tape.mul(y, y))

        check_op(build, 10)

    def test_mean_axis_broadcast(self):
        def build(tape, flat):
            x = tape.param(flat, 0, (2, 4, 3))
            ctx = tape.broadcast(tape.mean_axis(x, axis=-2), x.value.shape)
            y = tape.mul(x, ctx)
            return tape.sum_all(y)

        check_op(build, 24)

    def test_gather(self):
        idx = np.array([[0, 2, 2], [1, 0, 2]])

        def build(tape, flat):
            table = tape.param(flat, 0, (3, 4))
            y = tape.gather(table, idx)
            return tape.sum_all(tape.mul(y, y))

        check_op(build, 12)

    def test_sum_axes(self):
        def build(tape, flat):
            x = tape.param(flat, 0, (2, 3, 4))
            s = tape.sum_axes(x, (1, 2))
            return tape.sum_all(tape.mul(s, s))

        check_op(build, 24)


class TestBackward:
    def test_constant_loss_zero_grad(self):
        tape = Tape()
        flat = np.ones(4)
        tape.param(flat, 0, (4,))
        loss = tape.const(3.0)
        grad = tape.backward(loss, 4)
        assert np.array_equal(grad, np.zeros(4))

    def test_adjoint_linearity(self):
        flat = np.arange(1.0, 5.0)
        tape = Tape()
        x = tape.param(flat, 0, (4,))
        loss = tape.sum_all(tape.mul(x, x))
        g1 = tape.backward(loss, 4, adjoint=1.0)
        g2 = tape.backward(loss, 4, adjoint=2.0)
        assert np.allclose(g2, 2.0 * g1)

    def test_empty_tape_rejected(self):
        tape = Tape()
        with pytest.raises(NumericError):
            tape.backward(None, 4)

    def test_nonscalar_rejected(self):
        tape = Tape()
        x = tape.param(np.ones(4), 0, (4,))
        with pytest.raises(NumericError):
            tape.backward(x, 4)

    def test_shared_subexpression_accumulates(self):
        flat = np.array([2.0])
        tape = Tape()
        x = tape.param(flat, 0, (1,))
        y = tape.mul(x, x)  # x^2
        z = tape.sum_all(tape.mul(y, x))  # x^3
        grad = tape.backward(z, 1)
        assert np.isclose(grad[0], 3 * 2.0**2)
