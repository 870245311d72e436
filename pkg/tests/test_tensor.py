import math

import numpy as np
import pytest

from defectsynth import tensor as T
from defectsynth.errors import ContractError, ShapeError
from defectsynth.tensor import Tape, Tensor, finite_diff_grad, rel_error


def _gradcheck(f, x_np, tol=1e-5, h=1e-5):
    """Compare tape gradients against the central-difference oracle."""
    x = Tensor(x_np.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
        tape.backward(loss)
    fd = finite_diff_grad(f, x, h=h)
    assert x.grad is not None
    assert rel_error(x.grad, fd) < tol


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 2)))
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(T.matmul(eye, x).data, x.data)

    def test_hand_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[2.0], [4.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        a_np = rng.normal(size=(5, 7))
        b_np = rng.normal(size=(7, 3))
        b = Tensor(b_np, requires_grad=True)

        def f_a(a):
            return T.tsum(T.square(T.matmul(a, Tensor(b_np))))

        _gradcheck(f_a, a_np, tol=1e-6)

        a = Tensor(a_np, requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.square(T.matmul(Tensor(a_np), b)))
            tape.backward(loss)
        fd_b = finite_diff_grad(
            lambda bb: T.tsum(T.square(T.matmul(Tensor(a_np), bb))), b
        )
        assert rel_error(b.grad, fd_b) < 1e-6

    def test_batched_broadcast_gradients(self):
        rng = np.random.default_rng(11)
        a_np = rng.normal(size=(3, 4, 5))
        w_np = rng.normal(size=(5, 2))

        def f(w):
            return T.tsum(T.square(T.matmul(Tensor(a_np), w)))

        _gradcheck(f, w_np, tol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        y = T.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(y.data, [[0.5, 0.5]], rtol=0, atol=1e-15)

    def test_log_inputs_forced(self):
        x = Tensor([[math.log(1), math.log(2), math.log(3)]])
        y = T.softmax_rows(x)
        np.testing.assert_allclose(y.data, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)

    def test_rows_sum_to_one_double(self):
        rng = np.random.default_rng(3)
        y = T.softmax_rows(Tensor(rng.normal(size=(9, 13)) * 10))
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_rows_sum_to_one_single(self):
        rng = np.random.default_rng(4)
        x32 = rng.normal(size=(6, 8)).astype(np.float32) * 5
        y = T.softmax_rows(Tensor(x32))
        assert y.dtype == np.float32
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=0, atol=1e-6)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x_np = rng.normal(size=(4, 6))

        def f(x):
            w = Tensor(np.linspace(-1.0, 1.0, 24).reshape(4, 6))
            return T.tsum(T.mul(T.softmax_rows(x), w))

        _gradcheck(f, x_np, tol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_elementwise_square_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_value_used_twice_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(T.add(T.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            with Tape() as tape:
                tape.backward(T.mul(x, x))

    def test_tape_consumed(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x)
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_composed_softmax_matmul_chain(self):
        rng = np.random.default_rng(9)
        w_np = rng.normal(size=(6, 4))
        x_np = rng.normal(size=(3, 6))

        def f(w):
            logits = T.matmul(Tensor(x_np), w)
            probs = T.softmax_rows(logits)
            ref = Tensor(np.linspace(0.0, 1.0, 12).reshape(3, 4))
            return T.tsum(T.square(T.sub(probs, ref)))

        _gradcheck(f, w_np, tol=1e-5)


class TestFiniteDiff:
    def test_sum_is_ones(self):
        x = Tensor(np.array([0.3, -0.7, 2.0]))
        fd = finite_diff_grad(lambda t: T.tsum(t), x, h=1e-4)
        np.testing.assert_allclose(fd, np.ones(3), atol=1e-7)

    def test_square_at_three(self):
        fd = finite_diff_grad(lambda t: T.tsum(T.square(t)), Tensor([3.0]), h=1e-4)
        assert abs(fd[0] - 6.0) < 1e-6

    def test_h_must_be_positive(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: T.tsum(t), Tensor([1.0]), h=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_20_seeds(seed):
    """Every differentiable primitive against the oracle, rel tol 1e-5."""
    rng = np.random.default_rng(1000 + seed)
    x_np = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 4)))
    mask = (rng.random((3, 4)) > 0.5).astype(np.float64)

    shift = Tensor(rng.normal(size=(3, 4)))
    cases = [
        lambda x: T.tsum(T.square(T.add(x, shift))),
        lambda x: T.tsum(T.square(T.sub(shift, x))),
        lambda x: T.tsum(T.square(T.matmul(x, w))),
        lambda x: T.tsum(T.gelu(x)),
        lambda x: T.tsum(T.square(T.softmax_rows(x))),
        lambda x: T.masked_sum(T.square(x), mask),
        lambda x: T.tsum(T.square(T.transpose(x))),
        lambda x: T.tsum(T.square(T.reshape(x, (4, 3)))),
        lambda x: T.tmean(T.square(x), axis=1).sum(),
        lambda x: T.tsum(T.div(x, Tensor(np.full((3, 4), 2.5)))),
        lambda x: T.tsum(T.square(T.concat([x, x], axis=0))),
        lambda x: T.tsum(T.square(T.take_rows(x, np.array([0, 2, 2])))),
    ]
    for f in cases:
        _gradcheck(f, x_np, tol=1e-5)

    g = Tensor(rng.normal(size=(4,)))
    b = Tensor(rng.normal(size=(4,)))
    _gradcheck(lambda x: T.tsum(T.square(T.layer_norm(x, g, b))), x_np, tol=1e-5)


def test_layer_norm_param_gradients():
    rng = np.random.default_rng(2)
    x_np = rng.normal(size=(5, 6))
    g = Tensor(rng.normal(size=(6,)), requires_grad=True)
    b = Tensor(rng.normal(size=(6,)), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.square(T.layer_norm(Tensor(x_np), g, b)))
        tape.backward(loss)
    fd_g = finite_diff_grad(
        lambda gg: T.tsum(T.square(T.layer_norm(Tensor(x_np), gg, b.detach()))), g
    )
    fd_b = finite_diff_grad(
        lambda bb: T.tsum(T.square(T.layer_norm(Tensor(x_np), g.detach(), bb))), b
    )
    assert rel_error(g.grad, fd_g) < 1e-5
    assert rel_error(b.grad, fd_b) < 1e-5


class TestSpatialOps:
    def test_im2col_shapes_and_grad(self):
        rng = np.random.default_rng(6)
        x_np = rng.normal(size=(2, 4, 4, 3))
        cols = T.im2col(Tensor(x_np), 3)
        assert cols.shape == (2, 16, 27)

        def f(x):
            return T.tsum(T.square(T.im2col(x, 3)))

        _gradcheck(f, x_np, tol=1e-6)

    def test_avg_pool_and_upsample_grads(self):
        rng = np.random.default_rng(8)
        x_np = rng.normal(size=(1, 4, 4, 2))
        _gradcheck(lambda x: T.tsum(T.square(T.avg_pool2(x))), x_np, tol=1e-6)
        _gradcheck(lambda x: T.tsum(T.square(T.upsample2(x))), x_np, tol=1e-6)

    def test_pool_then_upsample_roundtrip_constant(self):
        x = Tensor(np.full((1, 4, 4, 1), 0.7))
        y = T.upsample2(T.avg_pool2(x))
        np.testing.assert_allclose(y.data, x.data)


class TestDeterminismAndFiniteness:
    def test_forward_bitwise_reproducible(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(8, 8)))
            w = Tensor(rng.normal(size=(8, 8)))
            return T.softmax_rows(T.matmul(T.gelu(x), w)).data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()

    def test_forward_finite_on_finite_inputs(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(6, 6)) * 50)
        w = Tensor(rng.normal(size=(6, 6)) * 50)
        y = T.softmax_rows(T.matmul(x, w))
        assert np.isfinite(y.data).all()
        z = T.gelu(T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))))
        assert np.isfinite(z.data).all()

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.square(x)
        assert not y.requires_grad

    def test_frozen_leaves_get_no_grad(self):
        frozen = Tensor([1.0, 2.0], requires_grad=False)
        live = Tensor([3.0, 4.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(T.tsum(T.mul(frozen, live)))
        assert frozen.grad is None
        np.testing.assert_allclose(live.grad, [1.0, 2.0])


def test_float32_ops_stay_float32():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
    y = T.gelu(T.add(T.scale(x, 2.0), 1.0))
    assert y.dtype == np.float32
    z = T.layer_norm(
        x,
        Tensor(np.ones(3, dtype=np.float32)),
        Tensor(np.zeros(3, dtype=np.float32)),
    )
    assert z.dtype == np.float32
