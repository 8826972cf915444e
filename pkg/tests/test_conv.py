import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcorenet import Tensor, precision
from dualcorenet.conv import (conv2d, depthwise_conv2d, depthwise_separable_conv, global_avg_pool, maxpool2d,
                              resize_nearest, upsample2d)
from dualcorenet.errors import ConfigError, ShapeError
from dualcorenet.gradcheck import finite_diff_grad, relative_error
from dualcorenet.verify import composed_separable_oracle


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        assert np.array_equal(conv2d(t(x), t(np.ones((1, 1, 1, 1)))).data, x.astype(np.float32))

    def test_ones_same_padding(self):
        out = conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), 1, "same").data[0, 0]
        assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]

    def test_valid_extent(self):
        out = conv2d(t(np.ones((1, 2, 9, 7))), t(np.ones((3, 2, 3, 3))), 2, "valid")
        assert out.shape == (1, 3, 4, 3)

    def test_no_kernel_flip(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 0, 0] = 1.0  # top-left tap reads the up-left neighbour
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        assert conv2d(t(x), t(k)).data[0, 0, 1, 1] == x[0, 0, 0, 0]

    def test_even_kernel_same_rejected(self):
        with pytest.raises(ConfigError):
            conv2d(t(np.ones((1, 1, 4, 4))), t(np.ones((1, 1, 2, 2))), 1, "same")

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_same_preserves_extent(self, k):
        assert conv2d(t(np.ones((2, 1, 9, 6))), t(np.ones((2, 1, k, k)))).shape == (2, 2, 9, 6)

    def test_gradient(self, f64, rng):
        x, w = t(rng.normal(size=(2, 2, 5, 5)), True), t(rng.normal(size=(3, 2, 3, 3)), True)
        conv2d(x, w, 1, "same").sum().backward()
        assert relative_error(w.grad, finite_diff_grad(lambda v: conv2d(x, v).sum(), w, 1e-6)) < 1e-3
        assert relative_error(x.grad, finite_diff_grad(lambda v: conv2d(v, w).sum(), x, 1e-6)) < 1e-3


class TestSeparable:
    def test_identity(self, f64, rng):
        x = rng.normal(size=(1, 3, 5, 5))
        depth = np.zeros((3, 1, 3, 3))
        depth[:, 0, 1, 1] = 1.0
        point = np.eye(3).reshape(3, 3, 1, 1)
        assert np.array_equal(depthwise_separable_conv(t(x), t(depth), t(point)).data, x)

    def test_sum_of_filtered_channels(self, f64, rng):
        x, depth = t(rng.normal(size=(1, 2, 6, 6))), t(rng.normal(size=(2, 1, 3, 3)))
        out = depthwise_separable_conv(x, depth, t(np.ones((1, 2, 1, 1)))).data
        per_channel = [conv2d(Tensor(x.data[:, c:c + 1]), Tensor(depth.data[c:c + 1])).data for c in range(2)]
        np.testing.assert_allclose(out, per_channel[0] + per_channel[1], rtol=1e-12)

    def test_parameter_count(self):
        from dualcorenet.layers import conv_specs, sep_conv_specs
        weights = lambda specs: sum(int(np.prod(s.shape)) for s in specs if s.fan_in)  # noqa: E731
        assert weights(sep_conv_specs("s", 728, 728, 3)) == 728 * 9 + 728 * 728 == 536_536
        assert weights(conv_specs("c", 728, 728, 3)) == 728 * 728 * 9 == 4_769_856

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            depthwise_separable_conv(t(np.ones((1, 2, 4, 4))), t(np.ones((3, 1, 3, 3))), t(np.ones((1, 2, 1, 1))))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bitwise_oracle(self, seed):
        r = np.random.default_rng(seed)
        c, o, k = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.choice([1, 3, 5]))
        x, d, p = r.normal(size=(2, c, 6, 5)), r.normal(size=(c, 1, k, k)), r.normal(size=(o, c, 1, 1))
        with precision("f64"):
            got = depthwise_separable_conv(Tensor(x), Tensor(d), Tensor(p)).data
            assert np.array_equal(got, composed_separable_oracle(x, d, p))

    def test_depthwise_gradient(self, f64, rng):
        x, k = t(rng.normal(size=(1, 2, 5, 5)), True), t(rng.normal(size=(2, 1, 3, 3)), True)
        depthwise_conv2d(x, k).sum().backward()
        assert relative_error(k.grad, finite_diff_grad(lambda v: depthwise_conv2d(x, v).sum(), k, 1e-6)) < 1e-3


class TestPooling:
    def test_window_max(self):
        assert maxpool2d(t([[[[1, 2], [3, 4]]]]), 2).data.tolist() == [[[[4]]]]

    def test_constant_tie_goes_to_first(self):
        x = t(np.full((1, 1, 2, 2), 3.0), True)
        out = maxpool2d(x, 2)
        assert out.data.item() == 3.0
        out.sum().backward()
        assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]

    def test_brute_force(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        brute = np.array([[x[0, 0, i:i + 2, j:j + 2].max() for j in (0, 2)] for i in (0, 2)])
        assert np.array_equal(maxpool2d(t(x), 2).data[0, 0], brute.astype(np.float32))

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            maxpool2d(t(np.ones((1, 1, 5, 4))), 2)

    def test_upsample_identity_and_blocks(self):
        x = t([[[[1, 2], [3, 4]]]])
        assert np.array_equal(upsample2d(x, 1).data, x.data)
        up = upsample2d(x, 2).data[0, 0]
        assert up.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 999))
    def test_pool_inverts_upsample(self, f, seed):
        x = np.random.default_rng(seed).normal(size=(1, 2, 3, 2))
        assert np.array_equal(maxpool2d(upsample2d(t(x), f), f).data, t(x).data)

    def test_upsample_gradient_sums_blocks(self):
        x = t(np.ones((1, 1, 2, 2)), True)
        upsample2d(x, 3).sum().backward()
        assert (x.grad == 9).all()

    def test_resize_nearest_and_global_pool(self):
        x = t(np.arange(16.0).reshape(1, 1, 4, 4))
        assert resize_nearest(x, 2, 2).shape == (1, 1, 2, 2)
        assert global_avg_pool(t(np.full((2, 3, 4, 4), 1.5))).data.tolist() == [[1.5] * 3] * 2
