import numpy as np
import pytest

from dualcorenet import Tensor, make_rng
from dualcorenet.conv import conv2d
from dualcorenet.errors import ShapeError
from dualcorenet.gradcheck import finite_diff_grad, relative_error
from dualcorenet.layers import (NetworkParams, ParamSpec, dense, dense_specs, init_params, residual_forward,
                                sconv_block, sconv_block_specs, unet_block_specs, unet_down, unet_up)
from dualcorenet.model import lpl_specs, network_config


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def zeroed(params: NetworkParams) -> NetworkParams:
    for p in params.values():
        p.data[...] = 0.0
    return params


class TestResidual:
    def test_zero_inner_is_identity(self, rng):
        x = t(rng.normal(size=(1, 2, 4, 4)))
        zero_k = t(np.zeros((2, 2, 3, 3)))
        assert np.array_equal(residual_forward(x, lambda v: conv2d(v, zero_k)).data, x.data)

    def test_projection_for_downsampling_block(self):
        p = init_params(sconv_block_specs("b", 256, 728, 3, pool=True), make_rng(0))
        assert p["b.proj.weight"].shape == (728, 256, 1, 1)
        out = sconv_block(t(np.random.default_rng(0).normal(size=(1, 256, 56, 56))), p, "b", pool=True)
        assert out.shape == (1, 728, 28, 28)

    def test_unprojectable_mismatch(self):
        with pytest.raises(ShapeError):
            residual_forward(t(np.ones((1, 2, 4, 4))), lambda v: conv2d(v, t(np.ones((3, 2, 1, 1)))))

    def test_gradient_through_both_branches(self, f64, rng):
        w = t(rng.normal(size=(2, 2, 3, 3)))
        x = t(rng.normal(size=(1, 2, 4, 4)), True)
        residual_forward(x, lambda v: conv2d(v, w)).sum().backward()
        inner_only = finite_diff_grad(lambda v: conv2d(v, w).sum(), t(x.data), 1e-6)
        assert relative_error(x.grad, inner_only + 1.0) < 1e-6


class TestBlocks:
    def test_identity_initialized_constant_block(self, rng):
        p = zeroed(init_params(sconv_block_specs("m", 4, 4, 3, pool=False), make_rng(1)))
        assert "m.proj.weight" not in p
        x = t(np.abs(rng.normal(size=(1, 4, 6, 6))))  # non-negative, so the outer ReLU keeps it
        assert np.array_equal(sconv_block(x, p, "m", pool=False).data, x.data)

    def test_names_in_declaration_order(self):
        names = [s.name for s in sconv_block_specs("blk", 2, 4, 3, pool=True)]
        assert names == ["blk.sconv1.depth", "blk.sconv1.point", "blk.sconv1.bias",
                         "blk.sconv2.depth", "blk.sconv2.point", "blk.sconv2.bias",
                         "blk.proj.weight", "blk.proj.bias"]
        assert list(init_params(sconv_block_specs("blk", 2, 4, 3, True), make_rng(0))) == names

    def test_unet_down_odd_extent(self):
        p = init_params(unet_block_specs("d", 1, 2), make_rng(0))
        with pytest.raises(ShapeError):
            unet_down(t(np.ones((1, 1, 5, 6))), p, "d")

    def test_unet_down_constant_input(self):
        p = zeroed(init_params(unet_block_specs("d", 1, 3), make_rng(0)))
        p["d.proj.weight"].data[...] = 2.0
        skip, down = unet_down(t(np.full((1, 1, 4, 4), 0.5)), p, "d")
        assert np.allclose(skip.data, 1.0) and down.shape == (1, 3, 2, 2)

    def test_unet_up_shapes(self):
        p = init_params(unet_block_specs("u", 128 + 64, 64), make_rng(0))
        out = unet_up(t(np.ones((1, 128, 5, 5))), t(np.ones((1, 64, 10, 10))), p, "u")
        assert out.shape == (1, 64, 10, 10)

    def test_unet_up_zero(self):
        p = zeroed(init_params(unet_block_specs("u", 4, 2), make_rng(0)))
        out = unet_up(t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 2, 4, 4))), p, "u")
        assert not out.data.any()

    def test_unet_up_mismatch(self):
        p = init_params(unet_block_specs("u", 4, 2), make_rng(0))
        with pytest.raises(ShapeError):
            unet_up(t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 2, 6, 6))), p, "u")


class TestDense:
    def test_zero_relu(self):
        p = zeroed(init_params(dense_specs("fc", 3, 4), make_rng(0)))
        assert not dense(t(np.ones((2, 3))), p, "fc", "relu").data.any()

    def test_identity(self, rng):
        p = zeroed(init_params(dense_specs("fc", 3, 3), make_rng(0)))
        p["fc.weight"].data[...] = np.eye(3)
        x = rng.normal(size=(2, 3)).astype(np.float32)
        assert np.array_equal(dense(t(x), p, "fc").data, x)

    def test_head_shape_and_mismatch(self):
        p = init_params(dense_specs("head", 2048, 2), make_rng(0))
        assert dense(t(np.ones((5, 2048))), p, "head", "softmax").shape == (5, 2)
        with pytest.raises(ShapeError):
            dense(t(np.ones((5, 7))), p, "head")


class TestInit:
    def test_seeded_determinism(self):
        specs = lpl_specs(network_config("desk"))
        a, b = init_params(specs, make_rng(42)), init_params(specs, make_rng(42))
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        c = init_params(specs, make_rng(1))
        assert any(not np.array_equal(a[k].data, c[k].data) for k in a if "bias" not in k)

    def test_he_variance(self):
        fan_in = 50
        p = init_params([ParamSpec("w", (10_000,), fan_in)], make_rng(0))
        assert abs(p["w"].data.var() / (2 / fan_in) - 1) < 0.1

    def test_biases_zero_and_names_unique(self):
        p = init_params(lpl_specs(network_config("desk")), make_rng(3))
        assert all(not v.data.any() for k, v in p.items() if k.endswith(".bias"))
        with pytest.raises(ValueError):
            init_params([ParamSpec("x", (1,), 1), ParamSpec("x", (1,), 1)], make_rng(0))
