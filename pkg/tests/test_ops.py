import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faew import ops
from faew.errors import DimensionError
from faew.selftest import complex_dft_part, naive_conv2d, naive_unfold3x3, shift_oracle
from faew.tensor import Tensor


def naive_conv1d(x, w, padding):
    n, c, length = x.shape
    o, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    lo = length + 2 * padding - k + 1
    out = np.zeros((n, o, lo))
    for ni in range(n):
        for oc in range(o):
            for i in range(lo):
                out[ni, oc, i] = sum(w[oc, ci, j] * xp[ni, ci, i + j] for ci in range(c) for j in range(k))
    return out


class TestConv2d:
    def test_dilation_5_preserves_size(self, rng):
        x = Tensor(rng.standard_normal((1, 8, 32, 32)))
        w = Tensor(rng.standard_normal((8, 8, 3, 3)))
        assert ops.conv2d(x, w, padding=5, dilation=5).shape == (1, 8, 32, 32)

    def test_identity_pointwise_kernel(self, rng):
        x = rng.standard_normal((2, 5, 4, 3))
        w = np.eye(5).reshape(5, 5, 1, 1)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(5))).data
        np.testing.assert_array_equal(out, x)

    def test_groups_2_matches_sliding_window(self, rng):
        x = rng.standard_normal((1, 4, 6, 6))
        w = rng.standard_normal((4, 2, 3, 3))
        got = ops.conv2d(Tensor(x), Tensor(w), groups=2, padding=1).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, padding=1, groups=2), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,dilation,groups", [
        (1, 0, 1, 1), (2, 1, 1, 1), (1, 2, 2, 2), (3, 3, 3, 4), (2, 0, 2, 4),
    ])
    def test_matches_sliding_window(self, rng, stride, padding, dilation, groups):
        x = rng.standard_normal((2, 4, 9, 8))
        w = rng.standard_normal((8, 4 // groups, 3, 3))
        b = rng.standard_normal(8)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation, groups).data
        want = naive_conv2d(x, w, b, stride, padding, dilation, groups)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_grouped_equals_concatenated_per_group(self, rng):
        g = 3
        x = rng.standard_normal((1, 6, 5, 5))
        w = rng.standard_normal((9, 2, 3, 3))
        full = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=g).data
        parts = [ops.conv2d(Tensor(x[:, 2 * i:2 * i + 2]), Tensor(w[3 * i:3 * i + 3]), padding=1).data
                 for i in range(g)]
        np.testing.assert_allclose(full, np.concatenate(parts, axis=1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("h,k,p,d,s", [(7, 3, 1, 1, 1), (10, 3, 0, 2, 2), (9, 5, 2, 1, 3), (32, 3, 7, 7, 1)])
    def test_output_extent_formula(self, rng, h, k, p, d, s):
        x = Tensor(rng.standard_normal((1, 1, h, h)))
        w = Tensor(rng.standard_normal((1, 1, k, k)))
        assert ops.conv2d(x, w, stride=s, padding=p, dilation=d).shape[2] == (h + 2 * p - d * (k - 1) - 1) // s + 1

    def test_group_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3, 4, 4\).*\(4, 2, 3, 3\)"):
            ops.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((4, 2, 3, 3))), groups=2)

    def test_negative_padding_rejected(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=-1)


class TestConv1d:
    def test_length_three_kernel_three(self, rng):
        out = ops.conv1d(Tensor(rng.standard_normal((2, 1, 3))), Tensor(rng.standard_normal((1, 1, 3))))
        assert out.shape == (2, 1, 1)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 7))
        out = ops.conv1d(Tensor(x), Tensor(np.array([[[0.0, 1.0, 0.0]]])), padding=1).data
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("padding", [0, 1, 2])
    def test_matches_loop_oracle(self, rng, padding):
        x = rng.standard_normal((2, 3, 8))
        w = rng.standard_normal((4, 3, 3))
        got = ops.conv1d(Tensor(x), Tensor(w), padding=padding).data
        np.testing.assert_allclose(got, naive_conv1d(x, w, padding), rtol=0, atol=1e-12)


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_shape(self, rng):
        assert ops.linear(Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((4, 3)))).shape == (2, 4)

    def test_dot_product_oracle(self, rng):
        x = rng.standard_normal((2, 5, 3))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        got = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
        want = np.array([[[sum(x[i, j, k] * w[o, k] for k in range(3)) + b[o] for o in range(4)]
                          for j in range(5)] for i in range(2)])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(DimensionError):
            ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestPooling:
    @pytest.mark.parametrize("mode", ["avg", "max"])
    def test_constant(self, mode):
        assert np.all(ops.pool_adaptive(Tensor(np.full((2, 3, 4, 5), 1.5)), mode).data == 1.5)

    def test_hand_values(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert ops.pool_adaptive(x, "avg").data.item() == 2.5
        assert ops.pool_adaptive(x, "max").data.item() == 4.0

    def test_loop_oracle(self, rng):
        x = rng.standard_normal((1, 3, 5, 7))
        avg = ops.pool_adaptive(Tensor(x), "avg").data.reshape(3)
        mx = ops.pool_adaptive(Tensor(x), "max").data.reshape(3)
        for c in range(3):
            vals = [x[0, c, i, j] for i in range(5) for j in range(7)]
            assert avg[c] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
            assert mx[c] == max(vals)

    def test_max_ties_route_to_first(self):
        x = Tensor(np.array([[[[2.0, 5.0], [5.0, 1.0]]]]), requires_grad=True)
        ops.pool_adaptive(x, "max").sum().backward()
        np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 1.0, 0.0, 0.0])


class TestDft:
    def test_constant_is_dc_only(self):
        length, c = 6, 5
        out = ops.dft_real_2axes(Tensor(np.ones((1, length, c)))).data
        assert out[0, 0, 0] == pytest.approx(length * c, abs=1e-12)
        rest = out.copy()
        rest[0, 0, 0] = 0
        assert np.max(np.abs(rest)) < 1e-12

    def test_small_case_vs_complex_oracle(self, rng):
        x = rng.standard_normal((1, 4, 4))
        np.testing.assert_allclose(ops.dft_real_2axes(Tensor(x)).data, complex_dft_part(x), rtol=0, atol=1e-10)

    def test_explicit_sum_oracle(self, rng):
        x = rng.standard_normal((1, 3, 5))
        out = ops.dft_real_2axes(Tensor(x)).data
        for k in range(3):
            for m in range(5):
                acc = sum(x[0, a, b] * np.exp(-2j * np.pi * (k * a / 3 + m * b / 5))
                          for a in range(3) for b in range(5))
                assert out[0, k, m] == pytest.approx(acc.real, abs=1e-12)

    @pytest.mark.parametrize("part", ["real", "imag"])
    def test_linearity(self, rng, part):
        a, b = rng.standard_normal((2, 2, 7, 9))
        alpha, beta = 1.7, -0.3
        lhs = ops.dft_2axes(Tensor(alpha * a + beta * b), part).data
        rhs = alpha * ops.dft_2axes(Tensor(a), part).data + beta * ops.dft_2axes(Tensor(b), part).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_backward_is_the_transpose(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True)
        g = rng.standard_normal((1, 4, 3))
        (ops.dft_real_2axes(x) * Tensor(g)).sum().backward()
        # <A x, g> = <x, A^T g>
        lhs = np.sum(ops.dft_real_2axes(Tensor(x.data)).data * g)
        assert np.sum(x.data * x.grad) == pytest.approx(lhs, rel=1e-12)

    def test_rank_checked(self):
        with pytest.raises(DimensionError):
            ops.dft_real_2axes(Tensor(np.ones((4, 4))))


class TestUnfold:
    def test_single_pixel(self):
        out = ops.unfold3x3(Tensor(np.array([[[[7.0]]]]))).data.reshape(9)
        np.testing.assert_array_equal(out, [0, 0, 0, 0, 7.0, 0, 0, 0, 0])

    def test_shape(self, rng):
        assert ops.unfold3x3(Tensor(rng.standard_normal((1, 4, 8, 8)))).shape == (1, 36, 64)

    def test_gather_oracle(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        np.testing.assert_array_equal(ops.unfold3x3(Tensor(x)).data, naive_unfold3x3(x))

    def test_fold_is_overlap_sum(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 5)), requires_grad=True)
        ops.unfold3x3(x).sum().backward()
        # each pixel is counted once per in-bounds neighbour position
        counts = np.pad(np.ones((4, 5)), 1)
        want = sum(counts[1 + dy:5 + dy, 1 + dx:6 + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1))
        np.testing.assert_array_equal(x.grad[0, 0], want)


class TestResize:
    def test_same_size_is_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        assert ops.resize_bilinear(x, (5, 5)) is x

    def test_constant_preserved(self):
        out = ops.resize_bilinear(Tensor(np.full((1, 1, 3, 4), 2.5)), (7, 9)).data
        np.testing.assert_allclose(out, 2.5, atol=1e-15)

    @pytest.mark.parametrize("size", [(16, 16), (2, 3), (5, 11)])
    def test_output_shape(self, rng, size):
        assert ops.resize_bilinear(Tensor(rng.standard_normal((2, 3, 4, 6))), size).shape == (2, 3) + size


class TestGridSample:
    def test_zero_flow_bit_exact(self, rng):
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        out = ops.grid_sample_bilinear(Tensor(x), Tensor(np.zeros((2, 2, 7, 6), np.float32))).data
        assert np.array_equal(out, x)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(-3, 3), st.integers(-3, 3))
    def test_integer_shift_matches_oracle(self, dx, dy):
        x = np.random.default_rng(abs(dx) * 7 + abs(dy)).standard_normal((1, 2, 8, 9))
        flow = np.zeros((1, 2, 8, 9))
        flow[:, 0], flow[:, 1] = dx, dy
        out = ops.grid_sample_bilinear(Tensor(x), Tensor(flow)).data
        assert np.array_equal(out, shift_oracle(x, dx, dy))

    def test_half_pixel_is_midpoint(self):
        x = np.arange(4.0).reshape(1, 1, 1, 4)
        flow = np.zeros((1, 2, 1, 4))
        flow[:, 0] = 0.5
        out = ops.grid_sample_bilinear(Tensor(x), Tensor(flow)).data.reshape(-1)
        np.testing.assert_array_equal(out, [0.5, 1.5, 2.5, 3.0])

    def test_incompatible_flow(self):
        with pytest.raises(DimensionError):
            ops.grid_sample_bilinear(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))


class TestLayoutHelpers:
    def test_tokens_map_round_trip(self, rng):
        t = Tensor(rng.standard_normal((2, 12, 5)))
        back = ops.map_to_tokens(ops.tokens_to_map(t, (3, 4)))
        np.testing.assert_array_equal(back.data, t.data)

    def test_row_major_scan(self):
        t = Tensor(np.arange(6.0).reshape(1, 6, 1))
        np.testing.assert_array_equal(ops.tokens_to_map(t, (2, 3)).data[0, 0], [[0, 1, 2], [3, 4, 5]])

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            ops.tokens_to_map(Tensor(np.ones((1, 5, 2))), (2, 3))

    def test_conv_transpose_kernel_equals_stride(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal((2, 4, 2, 2))
        out = ops.conv_transpose_stride(Tensor(x), Tensor(w)).data
        assert out.shape == (1, 4, 6, 6)
        for i in range(3):
            for j in range(3):
                block = np.einsum("c,cokl->okl", x[0, :, i, j], w)
                np.testing.assert_allclose(out[0, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2], block, atol=1e-12)

    def test_layer_norm_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8))
        w, b = rng.standard_normal(8), rng.standard_normal(8)
        got = ops.layer_norm(Tensor(x), Tensor(w), Tensor(b)).data
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        np.testing.assert_allclose(got, (x - mu) / np.sqrt(var + 1e-6) * w + b, atol=1e-12)
