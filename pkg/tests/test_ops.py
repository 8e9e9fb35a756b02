import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matchattn import Tape, Var, ops
from matchattn.autograd import NonFiniteError
from matchattn.gradcheck import check_gradients, finite_diff_grad


def _grad(fn, *vars_):
    for v in vars_:
        v.requires_grad = v.tracked = True
        v.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [v.grad for v in vars_]


class TestLinear:
    def test_identity(self, f64):
        y = ops.linear(np.array([1.0, 2.0]), np.eye(2))
        np.testing.assert_array_equal(y.data, [1.0, 2.0])

    def test_hand_arithmetic(self, f64):
        y = ops.linear(np.array([1.0, 1.0]), np.array([[2.0], [3.0]]))
        np.testing.assert_array_equal(y.data, [5.0])

    def test_shape_mismatch(self, f64):
        with pytest.raises(ValueError):
            ops.linear(np.ones(3), np.ones((2, 2)))

    def test_weight_gradient_matches_finite_differences(self, f64, rng):
        x = rng.normal(size=(4, 5))
        W = Var(rng.normal(size=(5, 3)))
        (gW,) = _grad(lambda: ops.sum_(ops.linear(x, W)), W)
        num = finite_diff_grad(lambda w: (x @ w).sum(), W.data, h=1e-5)
        np.testing.assert_allclose(gW, num, rtol=1e-6)
        # closed form: d sum(xW) / dW = x^T 1
        np.testing.assert_allclose(gW, x.T @ np.ones((4, 3)), rtol=1e-12)

    def test_bias_and_input_gradients(self, f64, rng):
        x = Var(rng.normal(size=(2, 3, 4)), name="x")
        W = Var(rng.normal(size=(4, 2)), name="W")
        b = Var(rng.normal(size=2), name="b")
        reports = check_gradients(lambda: ops.sum_(ops.mul(ops.linear(x, W, b), ops.linear(x, W, b))), [x, W, b])
        assert all(r.max_rel < 1e-6 for r in reports), reports


class TestLayerNorm:
    def test_constant_row(self, f64):
        y = ops.layer_norm(np.array([3.0, 3.0, 3.0]), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 0.0])

    def test_two_points(self, f64):
        y = ops.layer_norm(np.array([0.0, 2.0]), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(y.data, [-1.0, 1.0], atol=1e-6)

    def test_statistics(self, f64, rng):
        x = rng.normal(3.0, 5.0, size=(50, 16))
        y = ops.layer_norm(x, np.ones(16), np.zeros(16)).data
        assert np.abs(y.mean(-1)).max() < 1e-6
        assert np.abs(y.var(-1) - 1).max() < 1e-4

    def test_gradients(self, f64, rng):
        x = Var(rng.normal(size=(3, 6)), name="x")
        g = Var(rng.normal(size=6), name="gain")
        b = Var(rng.normal(size=6), name="bias")
        target = rng.normal(size=(3, 6))
        loss = lambda: ops.sum_(ops.mul(ops.layer_norm(x, g, b), target))
        assert all(r.max_rel < 1e-5 for r in check_gradients(loss, [x, g, b]))


class TestSoftmax:
    @pytest.mark.parametrize(
        "x, expected",
        [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]), ([0.0, math.log(3.0)], [0.25, 0.75])],
    )
    def test_examples(self, f64, x, expected):
        np.testing.assert_allclose(ops.softmax_lastdim(np.array(x)).data, expected, rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-1e4, 1e4)))
    def test_simplex(self, x):
        p = ops.softmax_lastdim(x).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)

    def test_gradient(self, f64, rng):
        x = Var(rng.normal(size=(2, 5)), name="x")
        t = rng.normal(size=(2, 5))
        assert check_gradients(lambda: ops.sum_(ops.mul(ops.softmax_lastdim(x), t)), [x])[0].max_rel < 1e-6


def naive_conv(x, k, bias, stride, padding, groups):
    """Scalar loops; accumulation order ky, kx, input channel."""
    B, H, W, cin = x.shape
    kh, kw, cg, cout = k.shape
    og = cout // groups
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Ho, Wo, cout))
    for b in range(B):
        for y in range(Ho):
            for x_ in range(Wo):
                for o in range(cout):
                    grp = o // og
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(cg):
                                acc += xp[b, y * stride + i, x_ * stride + j, grp * cg + c] * k[i, j, c, o]
                    out[b, y, x_, o] = acc
    if bias is not None:
        out = out + bias
    return out


class TestConv2d:
    def test_identity_kernel(self, f64, rng):
        x = rng.normal(size=(1, 4, 5, 1))
        y = ops.conv2d(x, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(y.data, x)

    def test_box_filter_on_constant(self, f64):
        x = np.full((1, 6, 6, 1), 2.5)
        y = ops.conv2d(x, np.full((3, 3, 1, 1), 1.0 / 9.0), padding=1).data
        np.testing.assert_allclose(y[0, 1:-1, 1:-1, 0], 2.5, rtol=1e-15)

    @pytest.mark.parametrize(
        "cin, cout, k, stride, padding, groups",
        [(2, 3, 3, 1, 1, 1), (3, 3, 3, 1, 1, 3), (4, 2, 2, 2, 0, 2), (3, 4, 4, 4, 0, 1)],
    )
    def test_matches_nested_loops_bitwise(self, f64, rng, cin, cout, k, stride, padding, groups):
        x = rng.normal(size=(2, 8, 8, cin))
        kern = rng.normal(size=(k, k, cin // groups, cout))
        bias = rng.normal(size=cout)
        got = ops.conv2d(x, kern, bias, stride=stride, padding=padding, groups=groups).data
        want = naive_conv(x, kern, bias, stride, padding, groups)
        np.testing.assert_array_equal(got, want)

    def test_random_5x5_against_oracle(self, f64, rng):
        x = rng.normal(size=(1, 5, 5, 2))
        kern = rng.normal(size=(3, 3, 2, 2))
        np.testing.assert_allclose(
            ops.conv2d(x, kern, padding=1).data, naive_conv(x, kern, None, 1, 1, 1), atol=1e-6
        )

    @pytest.mark.parametrize("groups, stride", [(1, 1), (3, 1), (1, 2)])
    def test_gradients(self, f64, rng, groups, stride):
        x = Var(rng.normal(size=(1, 6, 6, 3)), name="x")
        k = Var(rng.normal(size=(3, 3, 3 // groups, 3)), name="k")
        b = Var(rng.normal(size=3), name="b")
        t = Var(rng.normal(size=ops.conv2d(x, k, b, stride=stride, padding=1, groups=groups).shape))
        loss = lambda: ops.sum_(ops.mul(ops.conv2d(x, k, b, stride=stride, padding=1, groups=groups), t))
        assert all(r.max_rel < 1e-6 for r in check_gradients(loss, [x, k, b]))


class TestBilinearSample:
    def test_integer_coordinate_exact(self, f64, rng):
        field = rng.normal(size=(1, 5, 6, 3))
        out = ops.bilinear_sample(field, np.array([[[2.0, 3.0]]])).data
        np.testing.assert_array_equal(out[0, 0], field[0, 3, 2])

    def test_integer_grid_reproduces_field(self, f64, rng):
        field = rng.normal(size=(2, 4, 7, 2))
        grid = np.broadcast_to(ops.identity_grid(4, 7), (2, 4, 7, 2))
        np.testing.assert_array_equal(ops.bilinear_sample(field, grid).data, field)

    def test_midpoint(self, f64):
        field = np.array([[1.0, 5.0, 9.0], [0.0, 0.0, 0.0]]).reshape(1, 2, 3, 1)
        out = ops.bilinear_sample(field, np.array([[[0.5, 0.0]]])).data
        assert out[0, 0, 0] == 3.0

    def test_clamps_to_border(self, f64, rng):
        field = rng.normal(size=(1, 3, 3, 1))
        out = ops.bilinear_sample(field, np.array([[[-4.0, 10.0]]])).data
        assert out[0, 0, 0] == field[0, 2, 0, 0]

    def test_gradients(self, f64, rng):
        field = Var(rng.normal(size=(2, 5, 6, 3)), name="field")
        coords = Var(rng.uniform(0.1, 4.0, size=(2, 7, 2)), name="coords")
        t = rng.normal(size=(2, 7, 3))
        loss = lambda: ops.sum_(ops.mul(ops.bilinear_sample(field, coords), t))
        reports = check_gradients(loss, [field, coords])
        assert all(r.max_rel < 1e-5 for r in reports), reports


class TestActivations:
    def test_values(self, f64):
        assert ops.silu(np.array(0.0)).data == 0.0
        assert ops.gelu(np.array(0.0)).data == 0.0
        np.testing.assert_allclose(ops.silu(np.array(1.0)).data, 1 / (1 + math.exp(-1)), rtol=1e-15)
        assert abs(float(ops.silu(np.array(1.0)).data) - 0.7311) < 1e-4

    def test_gelu_close_to_erf_form(self, f64):
        x = np.linspace(-4, 4, 101)
        erf_form = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
        assert np.abs(ops.gelu(x).data - erf_form).max() < 1e-3

    @pytest.mark.parametrize("kind", ["gelu", "silu"])
    def test_gradients(self, f64, rng, kind):
        x = Var(rng.normal(size=20) * 3, name="x")
        # gradients are O(1); the floor keeps near-zero tails from dominating
        report = check_gradients(lambda: ops.sum_(ops.activation(x, kind)), [x], floor=1e-3)[0]
        assert report.max_rel < 1e-6


class TestFiniteDiff:
    def test_sum_gives_ones(self, rng):
        x = rng.normal(size=(3, 2))
        np.testing.assert_allclose(finite_diff_grad(np.sum, x), np.ones((3, 2)), rtol=1e-9)

    def test_sum_of_squares(self):
        g = finite_diff_grad(lambda v: (v**2).sum(), np.array([1.0, 2.0]), h=1e-6)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            finite_diff_grad(lambda v: np.inf, np.zeros(1))


class TestRecording:
    def test_fan_in_sums_branch_gradients(self, f64, rng):
        x = Var(rng.normal(size=4))
        (g,) = _grad(lambda: ops.sum_(ops.add(ops.mul(x, 2.0), ops.mul(x, 3.0))), x)
        np.testing.assert_array_equal(g, np.full(4, 5.0))

    def test_non_finite_output_raises(self, f64):
        with pytest.raises(NonFiniteError):
            ops.mul(np.array([np.inf]), 1.0)

    def test_split_concat_round_trip(self, f64, rng):
        x = Var(rng.normal(size=(2, 7)), name="x")
        t = rng.normal(size=(2, 7))

        def loss():
            a, b, c = ops.split(x, [2, 4, 1])
            return ops.sum_(ops.mul(ops.concat([c, a, b]), t))

        assert check_gradients(loss, [x])[0].max_rel < 1e-7
