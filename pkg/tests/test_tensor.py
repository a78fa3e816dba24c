import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smamba.functional import (
    attention,
    conv2d,
    global_avg_pool,
    global_max_pool,
    linear,
    upsample_bilinear,
)
from smamba.gradcheck import gradcheck
from smamba.tensor import (
    NonFiniteError,
    Parameter,
    Tensor,
    backward,
    concat,
    default_dtype,
    exp,
    gelu,
    layer_norm,
    log,
    matmul,
    sigmoid,
    silu,
    softmax,
    softplus,
    tanh,
)


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def conv_oracle(x, k, b):
    """Same-padded cross-correlation by explicit loops."""
    n, h, w, cin = x.shape
    ks, _, _, cout = k.shape
    r = ks // 2
    out = np.zeros((n, h, w, cout))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                for co in range(cout):
                    acc = b[co]
                    for dy in range(ks):
                        for dx in range(ks):
                            sy, sx = y + dy - r, xx + dx - r
                            if 0 <= sy < h and 0 <= sx < w:
                                acc += x[i, sy, sx, :] @ k[dy, dx, :, co]
                    out[i, y, xx, co] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 5, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_counts_neighbours(self):
        out = conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1))).data[0, ..., 0]
        expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], float)
        np.testing.assert_array_equal(out, expected)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, k, b = rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        np.testing.assert_allclose(out, conv_oracle(x, k, b), rtol=1e-6, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.sampled_from([1, 3, 5, 7]), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_odd_kernels_match_oracle(self, k, cin, cout, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 6, 7, cin))
        kern, b = rng.normal(size=(k, k, cin, cout)), rng.normal(size=cout)
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(kern), Tensor(b)).data, conv_oracle(x, kern, b), rtol=1e-9, atol=1e-9)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        x = Parameter(rng.normal(size=(1, 5, 5, 2)))
        k = Parameter(rng.normal(size=(3, 3, 2, 2)))
        b = Parameter(rng.normal(size=2))
        probe = rng.normal(size=(1, 5, 5, 2))
        assert gradcheck(lambda: (conv2d(x, k, b) * Tensor(probe)).sum(), [x, k, b]) < 1e-6


class TestPooling:
    def test_constant(self):
        x = Tensor(np.full((1, 3, 4, 2), 1.5))
        np.testing.assert_array_equal(global_max_pool(x).data, np.full((1, 1, 1, 2), 1.5))
        np.testing.assert_array_equal(global_avg_pool(x).data, np.full((1, 1, 1, 2), 1.5))

    def test_hand_values(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
        assert global_max_pool(x).data.item() == 4.0
        assert global_avg_pool(x).data.item() == 2.5

    def test_max_gradient_goes_to_first_argmax(self):
        x = Parameter(np.array([[5.0, 1.0], [5.0, 5.0]])[..., None])
        (g,) = backward(global_max_pool(x).sum(), [x])
        np.testing.assert_array_equal(g[..., 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_max_gradient_matches_fd_without_ties(self):
        x = Parameter(np.random.default_rng(3).normal(size=(4, 4, 3)))
        assert gradcheck(lambda: global_max_pool(x).sum(), [x]) < 1e-6


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_hand_value(self):
        y = linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([0.0, 1.0]))
        np.testing.assert_array_equal(y.data, [1.0, 5.0])

    def test_weight_gradient_is_outer_product_sum(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 3))
        w = Parameter(rng.normal(size=(3, 2)))
        b = Parameter(np.zeros(2))
        gw, gb = backward(linear(Tensor(x), w, b).sum(), [w, b])
        np.testing.assert_allclose(gw, x.sum(axis=0)[:, None] * np.ones((1, 2)))
        np.testing.assert_allclose(gb, [5.0, 5.0])
        assert gradcheck(lambda: linear(Tensor(x), w, b).sum(), [w, b]) < 1e-6


class TestActivations:
    def test_fixed_points(self):
        assert silu(Tensor(0.0)).data == 0.0
        assert sigmoid(Tensor(0.0)).data == 0.5

    def test_softmax_constant_row(self):
        np.testing.assert_allclose(softmax(Tensor(np.full((1, 4), 3.0))).data, [[0.25] * 4])

    def test_softplus_bounds(self):
        x = np.linspace(-30, 30, 601)
        sp = softplus(Tensor(x)).data
        assert np.all(sp >= np.maximum(x, 0.0))
        assert abs(softplus(Tensor(20.0)).data - 20.0) < 1e-8

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, x):
        np.testing.assert_allclose(softmax(Tensor(x)).data.sum(axis=-1), 1.0, rtol=1e-12)

    def test_layer_norm_standardizes(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(4, 16))
        y = layer_norm(Tensor(x), eps=0.0).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, rtol=1e-10)

    def test_gelu_tanh_form(self):
        x = np.linspace(-4, 4, 17)
        expected = 0.5 * x * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(gelu(Tensor(x)).data, expected, rtol=1e-14)

    def test_unary_gradients(self):
        rng = np.random.default_rng(6)
        x = Parameter(rng.normal(size=(3, 4)))
        probe = Tensor(rng.normal(size=(3, 4)))
        for fn in (silu, sigmoid, softplus, gelu, tanh, exp, lambda t: softmax(t), lambda t: layer_norm(t)):
            assert gradcheck(lambda: (fn(x) * probe).sum(), [x]) < 1e-6
        xp = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        assert gradcheck(lambda: (log(xp) * probe).sum(), [xp]) < 1e-6


class TestTensorOps:
    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(2, 3, 4))
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(4))).data, a)

    def test_broadcast_gate_scales_channels(self):
        x = np.random.default_rng(1).normal(size=(3, 3, 2))
        gate = np.array([2.0, -1.0]).reshape(1, 1, 2)
        np.testing.assert_array_equal((Tensor(x) * Tensor(gate)).data, x * gate)

    def test_upsample_closed_form(self):
        x = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]])[..., None])
        out = upsample_bilinear(x, 2).data[..., 0]
        np.testing.assert_allclose(out, np.tile([0.0, 0.25, 0.75, 1.0], (4, 1)))

    def test_concat_gradient_splits(self):
        a, b = Parameter(np.ones((2, 2))), Parameter(np.ones((2, 3)))
        w = np.arange(10.0).reshape(2, 5)
        ga, gb = backward((concat([a, b], axis=1) * Tensor(w)).sum(), [a, b])
        np.testing.assert_array_equal(ga, w[:, :2])
        np.testing.assert_array_equal(gb, w[:, 2:])

    def test_attention_gradcheck(self):
        rng = np.random.default_rng(7)
        q, k, v = (Parameter(rng.normal(size=(1, 3, 4))) for _ in range(3))
        probe = Tensor(rng.normal(size=(1, 3, 4)))
        assert gradcheck(lambda: (attention(q, k, v, heads=2) * probe).sum(), [q, k, v]) < 1e-6


class TestBackward:
    def test_square_sum(self):
        x = Parameter(np.array([1.0, -2.0, 3.0]))
        (g,) = backward((x * x).sum(), [x])
        np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])

    def test_unused_parameter_gets_zero(self):
        x, unused = Parameter(np.ones(3)), Parameter(np.ones(2))
        _, g = backward((x * 2.0).sum(), [x, unused])
        np.testing.assert_array_equal(g, np.zeros(2))

    def test_shared_subexpression_accumulates(self):
        x = Parameter(np.array([2.0]))
        y = x * x
        (g,) = backward((y + y * x).sum(), [x])
        np.testing.assert_allclose(g, [2 * 2.0 + 3 * 2.0**2])  # d(x^2 + x^3)/dx

    def test_repeat_backward_resets(self):
        x = Parameter(np.array([1.0, 2.0]))
        backward((x * 3.0).sum(), [x])
        (g,) = backward((x * 3.0).sum(), [x])
        np.testing.assert_array_equal(g, [3.0, 3.0])

    def test_non_finite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            log(Tensor(np.array([0.0])))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_composite_graph_fd(self, seed):
        rng = np.random.default_rng(seed)
        w1 = Parameter(rng.normal(size=(4, 5)) * 0.5)
        w2 = Parameter(rng.normal(size=(5, 3)) * 0.5)
        x = Tensor(rng.normal(size=(2, 4)))

        def f():
            h = gelu(matmul(x, w1))
            return (softmax(matmul(h, w2)) * sigmoid(matmul(h, w2))).sum()

        assert gradcheck(f, [w1, w2]) < 1e-4
