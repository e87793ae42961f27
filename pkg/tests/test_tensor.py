import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tauflow import tensor as T
from tauflow.gradcheck import check_gradients, relative_error
from tauflow.tensor import Tape, Tensor


def naive_conv(x, w, b, stride, padding, groups):
    B, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    og = O // groups
    for n in range(B):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(Cg):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, g * Cg + c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def naive_bilinear(img, oh, ow):
    H, W = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        sy = max((i + 0.5) * H / oh - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), H - 1)
        y1 = min(y0 + 1, H - 1)
        ly = sy - y0
        for j in range(ow):
            sx = max((j + 0.5) * W / ow - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), W - 1)
            x1 = min(x0 + 1, W - 1)
            lx = sx - x0
            out[i, j] = ((1 - ly) * ((1 - lx) * img[y0, x0] + lx * img[y0, x1])
                         + ly * ((1 - lx) * img[y1, x0] + lx * img[y1, x1]))
    return out


class TestConv2d:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 5)).astype(np.float32)
        out = T.conv2d(Tensor(x), T.ones((1, 1, 1, 1)), T.zeros(1))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_3x3(self):
        out = T.conv2d(T.ones((1, 1, 3, 3)), T.ones((1, 1, 3, 3)), T.zeros(1), padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0 and out[2, 2] == 4.0
        assert out[0, 1] == 6.0

    def test_depthwise_separation(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 1, 3, 3))
        base = T.conv2d(Tensor(x), Tensor(w), None, padding=1, groups=2).data
        x2 = x.copy()
        x2[:, 1] += 10.0
        moved = T.conv2d(Tensor(x2), Tensor(w), None, padding=1, groups=2).data
        np.testing.assert_array_equal(base[:, 0], moved[:, 0])
        assert not np.allclose(base[:, 1], moved[:, 1])

    @pytest.mark.parametrize("cin,cout,k,stride,padding,groups", [
        (3, 4, 3, 1, 1, 1),
        (4, 4, 3, 2, 1, 1),
        (4, 4, 3, 1, 1, 4),
        (4, 6, 3, 1, 1, 2),
        (5, 3, 1, 1, 0, 1),
        (2, 3, 5, 1, 2, 1),
    ])
    def test_matches_naive(self, cin, cout, k, stride, padding, groups):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, cin, 6, 7))
        w = rng.normal(size=(cout, cin // groups, k, k))
        b = rng.normal(size=cout)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, groups).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding, groups), atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(T.ones((1, 3, 4, 4)), T.ones((2, 2, 3, 3)), None, padding=1)
        with pytest.raises(T.ShapeError):
            T.conv2d(T.ones((1, 2, 4, 4)), T.ones((2, 2, 2, 2)), None)

    def test_non_finite_rejected(self):
        x = np.ones((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(T.NonFiniteError):
            T.conv2d(Tensor(x), T.ones((1, 1, 1, 1)), None)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(2, 2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        a, b = 0.7, -1.3
        lhs = T.conv2d(Tensor(a * x + b * y), Tensor(k), None, padding=1).data
        rhs = a * T.conv2d(Tensor(x), Tensor(k), None, padding=1).data + b * T.conv2d(
            Tensor(y), Tensor(k), None, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)
        k2 = rng.normal(size=k.shape)
        lhs = T.conv2d(Tensor(x), Tensor(a * k + b * k2), None, padding=1).data
        rhs = a * T.conv2d(Tensor(x), Tensor(k), None, padding=1).data + b * T.conv2d(
            Tensor(x), Tensor(k2), None, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 4, 3, 3)).astype(np.float32))
        a = T.conv2d(x, w, None, padding=1).data
        b = T.conv2d(x, w, None, padding=1).data
        assert a.tobytes() == b.tobytes()


class TestPointwise:
    def test_values(self):
        assert T.softplus(T.tensor([0.0])).item() == pytest.approx(math.log(2), abs=1e-6)
        assert T.tanh(T.tensor([0.0])).item() == 0.0
        sp = T.softplus(T.tensor([1000.0]))
        assert T.clamp(sp + 1e-6, 1e-2, 1e3).item() == 1000.0

    def test_clamp_gradient(self):
        x = Tensor(np.array([-2.0, 0.5, 3.0, 1.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.clamp(x, 0.0, 1.0).sum()
        g = tape.backward(loss)[x].data
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0])

    def test_clamp_bounds_validated(self):
        with pytest.raises(T.TensorError):
            T.clamp(T.ones(2), 1.0, 1.0)

    def test_non_finite_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.sigmoid(Tensor(np.array([np.inf])))

    @pytest.mark.parametrize("fn", ["sigmoid", "tanh", "softplus", "relu"])
    def test_gradcheck(self, fn):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=(2, 3, 4))
        x[np.abs(x) < 1e-2] = 0.3
        assert check_gradients(lambda t: T.pointwise_map(t, fn).sum(), [x]) <= 1e-4

    def test_affine(self):
        out = T.affine(T.tensor([1.0, 2.0]), 2.0, -1.0)
        np.testing.assert_array_equal(out.data, [1.0, 3.0])


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax_axis(T.ones((1, 5, 2, 2)), axis=1)
        np.testing.assert_allclose(out.data, 0.2, atol=1e-7)

    def test_closed_form(self):
        out = T.softmax_axis(T.tensor([0.0, math.log(3.0)], dtype=np.float64), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_high_temperature_uniform(self):
        x = Tensor(np.random.default_rng(6).normal(size=(3, 4)) * 5)
        out = T.softmax_axis(x, axis=1, temperature=np.full((3, 1), 1e6))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-3)

    def test_nonpositive_temperature(self):
        with pytest.raises(T.TensorError):
            T.softmax_axis(T.ones((2, 2)), 0, temperature=np.zeros((1, 2)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
    def test_simplex(self, x):
        y = T.softmax_axis(Tensor(x), axis=1).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_gradcheck_with_temperature(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, size=(2, 3, 4))
        temp = rng.uniform(0.5, 2.0, size=(2, 1, 4))
        w = rng.normal(size=x.shape)
        err = check_gradients(lambda t: (T.softmax_axis(t, 1, temp) * Tensor(w)).sum(), [x])
        assert err <= 1e-4


class TestReduce:
    def test_values(self):
        assert T.reduce_mean(T.ones((3, 3)) * 4.0).item() == 4.0
        assert T.reduce_mean(T.tensor([1.0, 2.0, 3.0, 4.0]), axes=0).item() == 2.5
        assert T.reduce_mean(T.tensor([[1.0, 1.0], [1.0, 5.0]]), axes=(0, 1)).item() == 2.0

    def test_errors(self):
        with pytest.raises(T.ShapeError):
            T.reduce_mean(T.ones((2, 2)), axes=(0, 0))
        with pytest.raises(T.ShapeError):
            T.reduce_mean(Tensor(np.zeros((0, 2))), axes=0)

    def test_gradcheck(self):
        x = np.random.default_rng(8).uniform(-1, 1, size=(2, 3, 4))
        w = np.random.default_rng(9).normal(size=(2, 4))
        assert check_gradients(lambda t: (T.reduce_mean(t, axes=1) * Tensor(w)).sum(), [x]) <= 1e-4


class TestGroupNorm:
    def test_constant_input(self):
        out = T.group_norm(T.ones((1, 4, 3, 3)) * 7.0, 2, T.ones(4), T.zeros(4))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_points(self):
        x = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
        out = T.group_norm(x, 1, T.ones(1, np.float64), T.zeros(1, np.float64), eps=1e-10)
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-8)

    def test_zero_gamma(self):
        x = Tensor(np.random.default_rng(10).normal(size=(2, 4, 3, 3)))
        beta = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
        out = T.group_norm(x, 2, T.zeros(4, np.float64), beta)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data[None, :, None, None], out.shape))

    def test_gradcheck(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, size=(2, 4, 3, 3))
        gamma, beta = rng.uniform(-1, 1, size=(2, 4))
        w = rng.normal(size=x.shape)
        err = check_gradients(lambda a, g, b: (T.group_norm(a, 2, g, b) * Tensor(w)).sum(), [x, gamma, beta])
        assert err <= 1e-4


class TestBilinear:
    def test_constant(self):
        out = T.bilinear_resize(T.ones((1, 2, 3, 5)) * 5.0, 7, 4)
        np.testing.assert_allclose(out.data, 5.0, atol=1e-6)

    def test_identity(self):
        x = np.random.default_rng(12).normal(size=(1, 2, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 4, 4).data, x, atol=1e-6)

    def test_2x2_to_4x4(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        got = T.bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
        expected = naive_bilinear(img, 4, 4)
        np.testing.assert_allclose(got, expected, atol=1e-12)
        # spot values from the half-pixel rule
        assert got[0, 0] == 0.0 and got[3, 3] == 3.0
        assert got[1, 1] == pytest.approx(0.75)

    @pytest.mark.parametrize("shape,out", [((5, 7), (3, 9)), ((8, 8), (4, 4)), ((3, 3), (7, 2))])
    def test_matches_naive(self, shape, out):
        img = np.random.default_rng(13).normal(size=shape)
        got = T.bilinear_resize(Tensor(img[None, None]), *out).data[0, 0]
        np.testing.assert_allclose(got, naive_bilinear(img, *out), atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(14)
        x = rng.uniform(-1, 1, size=(1, 2, 3, 4))
        w = rng.normal(size=(1, 2, 6, 5))
        assert check_gradients(lambda t: (T.bilinear_resize(t, 6, 5) * Tensor(w)).sum(), [x]) <= 1e-4


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor(np.random.default_rng(15).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        np.testing.assert_array_equal(tape.backward(loss)[x].data, 1.0)

    def test_half_square(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum() / 2.0
        np.testing.assert_array_equal(tape.backward(loss)[x].data, [1.0, -2.0, 3.0])

    def test_conv_identity_chain_rule(self):
        xv = np.array([[1.0, 2.0], [3.0, 4.0]])
        x = Tensor(xv[None, None], requires_grad=True)
        k = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with Tape() as tape:
            loss = T.conv2d(x, k, None).sum()
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x].data, 1.0)
        assert grads[k].data.item() == 10.0

    def test_single_shot(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        tape.backward(loss)
        with pytest.raises(T.TensorError):
            tape.backward(loss)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(T.ShapeError):
            tape.backward(y)

    def test_disconnected_leaf_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        grads = tape.backward(loss, wrt=[x, other])
        np.testing.assert_array_equal(grads[other].data, 0.0)

    def test_no_tape_no_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        assert y.node is None

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = (x * x * x).sum()
        assert tape.backward(loss)[x].data.item() == 12.0

    def test_concat_slice_roundtrip_gradient(self):
        rng = np.random.default_rng(16)
        a, b = rng.uniform(-1, 1, size=(2, 1, 3, 2, 2))
        w = rng.normal(size=(1, 4, 2, 2))

        def f(x, y):
            c = T.concat([x, y], axis=1)
            return (c[:, 1:5] * Tensor(w)).sum()
        assert check_gradients(f, [a, b]) <= 1e-4


class TestFiniteDiff:
    def test_sum(self):
        x = Tensor(np.random.default_rng(17).normal(size=(2, 3)))
        g = T.finite_diff_gradient(lambda t: t.sum(), x, 1e-4)
        np.testing.assert_allclose(g.data, 1.0, atol=1e-8)

    def test_half_square(self):
        g = T.finite_diff_gradient(lambda t: (t * t).sum() / 2.0, T.tensor([1.0, -2.0]), 1e-4)
        np.testing.assert_allclose(g.data, [1.0, -2.0], atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(T.NonFiniteError), np.errstate(invalid="ignore"):
            T.finite_diff_gradient(lambda t: T.log(t - 10.0).sum(), T.tensor([1.0]), 1e-4)

    def test_two_layer_conv_composition(self):
        rng = np.random.default_rng(18)
        x = rng.uniform(-1, 1, size=(2, 4, 8, 8))
        k1 = rng.uniform(-1, 1, size=(4, 4, 3, 3))
        k2 = rng.uniform(-1, 1, size=(2, 4, 3, 3))

        def f(a, w1, w2):
            h = T.tanh(T.conv2d(a, w1, None, padding=1) * 0.2)
            return (T.conv2d(h, w2, None, stride=2, padding=1) ** 2).sum()
        assert check_gradients(f, [x, k1, k2]) <= 1e-4

    def test_relative_error_definition(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert relative_error(np.array([1.0, 2.1]), np.array([1.0, 2.0])) == pytest.approx(0.1 / 2.1)
