import numpy as np
import pytest

from conftest import check_grad, fd_grad, max_rel_err
from pcbdet import tensor as T
from pcbdet.tensor import (Tensor, NonFiniteError, conv2d, conv2d_reference,
                           depthwise_conv2d, upsample_nearest, concat, matmul,
                           full, uniform, save_checkpoint, load_checkpoint)


class TestCreation:
    def test_zero_fill(self):
        t = full((2, 2), 0)
        assert t.data.tolist() == [[0, 0], [0, 0]]

    def test_constant_fill_sum(self):
        assert full((2, 3), 1).data.sum() == 6

    def test_seeded_uniform_deterministic(self):
        a = uniform((3,), seed=7)
        b = uniform((3,), seed=7)
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("shape", [(0,), (2, 0), (-1, 3)])
    def test_bad_shape(self, shape):
        with pytest.raises(ValueError):
            full(shape, 0.0)

    def test_nonfinite_forward_raises(self):
        x = Tensor([1.0, 0.0], requires_grad=True)
        with pytest.raises(NonFiniteError):
            (Tensor([1.0, 1.0]) / x).sum()


class TestConv:
    def test_scalar_multiply(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.full((1, 1, 1, 1), 2.0))
        y = conv2d(x, k)
        assert np.allclose(y.data, 2.0)
        assert y.shape == (1, 1, 3, 3)

    def test_delta_kernel_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        y = conv2d(x, Tensor(k), stride=1, padding=1)
        assert np.allclose(y.data, x.data)

    def test_matches_naive_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        y = conv2d(Tensor(x), Tensor(k), stride=2, padding=1)
        assert y.shape == (1, 3, 3, 3)
        assert np.abs(y.data - conv2d_reference(x, k, 2, 1)).max() <= 1e-12

    @pytest.mark.parametrize("stride,pad,kh", [(1, 0, 3), (1, 1, 3), (2, 1, 3),
                                               (2, 0, 1), (3, 2, 5)])
    def test_shape_formula(self, rng, stride, pad, kh):
        h = w = 11
        x = rng.normal(size=(1, 1, h, w))
        k = rng.normal(size=(2, 1, kh, kh))
        y = conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad)
        expect = (h + 2 * pad - kh) // stride + 1
        assert y.shape == (1, 2, expect, expect)
        assert np.abs(y.data - conv2d_reference(x, k, stride, pad)).max() <= 1e-12

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_depthwise_matches_grouped_naive(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(3, 3, 3))
        y = depthwise_conv2d(Tensor(x), Tensor(k), stride=1, padding=1)
        for c in range(3):
            ref = conv2d_reference(x[:, c:c + 1], k[c][None, None], 1, 1)
            assert np.abs(y.data[:, c:c + 1] - ref).max() <= 1e-12


class TestUpsample:
    def test_single_pixel(self):
        y = upsample_nearest(Tensor(np.full((1, 1, 1, 1), 5.0)), 2)
        assert np.allclose(y.data, 5.0) and y.shape == (1, 1, 2, 2)

    def test_block_replication(self):
        x = Tensor(np.array([[1., 2.], [3., 4.]]).reshape(1, 1, 2, 2))
        y = upsample_nearest(x, 2)
        assert np.allclose(y.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                          [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_backward_sums_blocks(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        upsample_nearest(x, 2).sum().backward()
        assert np.allclose(x.grad, 4.0)

    def test_factor_validation(self):
        with pytest.raises(ValueError):
            upsample_nearest(Tensor(np.zeros((1, 1, 2, 2))), 1)


class TestBackward:
    def test_sum_gradient_all_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        assert np.allclose(x.grad, 1.0)

    def test_square_gradient(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2).backward()

    def test_composite_conv_silu_sum_fd(self, rng):
        x0 = rng.uniform(-2, 2, size=(1, 1, 4, 4))
        k0 = rng.uniform(-2, 2, size=(2, 1, 3, 3))

        def op(t):
            return conv2d(t, Tensor(k0), padding=1).silu()

        check_grad(op, x0, tol=1e-5)

        def opk(t):
            return conv2d(Tensor(x0), t, padding=1).silu()

        check_grad(opk, k0, tol=1e-5)

    def test_unreached_parameter_zero_grad(self, rng):
        x = Tensor(rng.normal(size=(2,)), requires_grad=True)
        y = Tensor(rng.normal(size=(2,)), requires_grad=True)
        x.sum().backward()
        assert y.grad is None  # never touched: zero by convention

    def test_tape_visits_each_op_once(self, rng):
        # Diamond graph: grad of x through two paths must sum exactly once each.
        x = Tensor(np.array([2.0]), requires_grad=True)
        a = x * 3.0
        b = x * 4.0
        (a + b).sum().backward()
        assert np.allclose(x.grad, [7.0])


class TestActivations:
    def test_leaky_relu_values(self):
        y = Tensor(np.array([-1.0, 0.0, 2.0])).leaky_relu(0.1)
        assert np.allclose(y.data, [-0.1, 0.0, 2.0])

    def test_sigmoid_center(self):
        assert Tensor(np.array([0.0])).sigmoid().data[0] == 0.5

    def test_silu_scalar_oracle(self):
        import math
        want = 1.0 / (1.0 + math.exp(-1.0))
        assert abs(Tensor(np.array([1.0])).silu().data[0] - want) < 1e-12


PRIMITIVES = {
    "add": lambda t: t + Tensor(np.linspace(-1, 1, t.data.size).reshape(t.shape)),
    "mul": lambda t: t * Tensor(np.linspace(0.5, 2, t.data.size).reshape(t.shape)),
    "div": lambda t: Tensor(np.ones(t.shape)) / (t + 3.0),
    "neg": lambda t: -t,
    "pow": lambda t: (t + 3.0) ** 2.5,
    "exp": lambda t: t.exp(),
    "log": lambda t: (t + 3.0).log(),
    "sqrt": lambda t: (t + 3.0).sqrt(),
    "atan": lambda t: t.atan(),
    "sigmoid": lambda t: t.sigmoid(),
    "leaky_relu": lambda t: t.leaky_relu(0.1),
    "silu": lambda t: t.silu(),
    "maximum": lambda t: t.maximum(0.25),
    "abs": lambda t: (t + 0.05).abs(),
    "sum_axis": lambda t: t.reshape(4, 4).sum(axis=1),
    "mean": lambda t: t.mean(),
    "reshape": lambda t: t.reshape(2, 8) * 2.0,
    "getitem": lambda t: t.reshape(4, 4)[np.array([0, 2, 2]), np.array([1, 3, 3])],
    "softmax": lambda t: t.reshape(4, 4).softmax(axis=-1),
    "concat": lambda t: concat([t.reshape(4, 4), t.reshape(4, 4) * 2], axis=0),
    "matmul": lambda t: matmul(t.reshape(4, 4),
                               Tensor(np.linspace(-1, 1, 12).reshape(4, 3))),
    "upsample": lambda t: upsample_nearest(t.reshape(1, 1, 4, 4), 2),
    "conv": lambda t: conv2d(t.reshape(1, 1, 4, 4),
                             Tensor(np.linspace(-1, 1, 9).reshape(1, 1, 3, 3)),
                             padding=1),
    "depthwise": lambda t: depthwise_conv2d(
        t.reshape(1, 1, 4, 4), Tensor(np.linspace(-1, 1, 9).reshape(1, 3, 3)[:1]),
        padding=1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_fd(name, rng):
    op = PRIMITIVES[name]
    for trial in range(3):
        x0 = rng.uniform(-2, 2, size=16)
        if name in ("leaky_relu", "maximum", "abs"):
            # Keep away from the kink where FD is ill-defined.
            x0 = np.where(np.abs(x0 - 0.25) < 0.05, x0 + 0.2, x0)
        check_grad(op, x0, tol=1e-5)


class TestDeterminism:
    def test_forward_backward_bit_identical(self, rng):
        x0 = rng.normal(size=(1, 2, 6, 6))
        k0 = rng.normal(size=(3, 2, 3, 3))

        def run():
            x = Tensor(x0.copy(), requires_grad=True)
            k = Tensor(k0.copy(), requires_grad=True)
            y = conv2d(x, k, stride=1, padding=1).silu().sum()
            y.backward()
            return y.data.copy(), x.grad.copy(), k.grad.copy()

        r1, r2 = run(), run()
        for a, b in zip(r1, r2):
            assert np.array_equal(a, b)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        tensors = {
            "a": rng.normal(size=(3, 4)),
            "b/nested.w": rng.normal(size=(2, 1, 3, 3)),
            "scalar": np.array(1.2345678901234567),
        }
        path = tmp_path / "ckpt.pcbd"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], np.asarray(tensors[k]))
            assert loaded[k].dtype == np.float64

    def test_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.pcbd"
        p.write_bytes(b"XXXX" + b"\0" * 8)
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "one.pcbd"
        save_checkpoint(p, {"w": np.zeros((2, 3))})
        blob = p.read_bytes()
        assert blob[:4] == b"PCBD"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 1
