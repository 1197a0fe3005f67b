import numpy as np
import pytest

from oracles import scalar_bilinear, scalar_conv
from spx import autodiff as ad
from spx.autodiff import Tensor
from spx.backbone import (
    BackboneConfig,
    build_hypercolumn,
    check_image_dims,
    encode,
    init_backbone_params,
    init_hypercolumn_params,
)
from spx.errors import ConfigError

SMALL = (2, 3, 4, 5, 6)


def params64(cfg, seed=0):
    rng = np.random.default_rng(seed)
    p = init_backbone_params(cfg, rng, np.float64)
    p.update(init_hypercolumn_params(cfg, rng, np.float64))
    return p


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


class TestEncode:
    def test_stride_arithmetic(self):
        cfg = BackboneConfig(SMALL, 8)
        feats = encode(T(np.zeros((1, 64, 128, 3))), params64(cfg))
        assert feats[2].shape == (1, 32, 64, 2)
        assert feats[8].shape == (1, 8, 16, 4)
        assert feats[32].shape == (1, 2, 4, 6)

    def test_zero_image_zero_bias(self):
        cfg = BackboneConfig(SMALL, 8)
        feats = encode(T(np.zeros((2, 32, 32, 3))), params64(cfg))
        for f in feats.values():
            assert np.all(f.data == 0.0)

    def test_constant_image_interior_constant(self):
        cfg = BackboneConfig(SMALL, 8)
        p = params64(cfg, seed=1)
        x = np.full((32, 32, 3), 0.7)
        f2 = encode(T(x[None]), p)[2].data[0]
        # block 0 against a direct-loop conv + norm + activation on the top-left 8x8 region
        ref = scalar_conv(x[:8, :8], p["backbone.block0.w"].data, p["backbone.block0.b"].data, 2, 1)
        ref = np_gelu(np_layer_norm(ref, p["backbone.block0.ln.g"].data, p["backbone.block0.ln.b"].data))
        np.testing.assert_allclose(f2[:3, :3], ref[:3, :3], rtol=1e-10, atol=1e-12)
        interior = f2[1:, 1:]  # top/left rows see zero padding, stride-2 leaves bottom/right clean
        np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)
        assert not np.allclose(f2[0, 0], interior[0, 0])

    def test_depth_adds_residual_layers(self):
        cfg = BackboneConfig(SMALL, 8, depth=2)
        p = params64(cfg)
        assert "backbone.block4.res1.w" in p and "backbone.block4.res2.w" not in p
        rng = np.random.default_rng(2)
        x = T(rng.random((1, 32, 32, 3)))
        feats = encode(x, p)
        plain = {k: v for k, v in p.items() if ".res" not in k}
        assert not np.allclose(feats[32].data, encode(x, plain)[32].data)

    @pytest.mark.parametrize("h,w,key", [(48, 64, "image_h"), (64, 40, "image_w"), (16, 32, "image_h")])
    def test_bad_dims_named(self, h, w, key):
        with pytest.raises(ConfigError) as e:
            check_image_dims(h, w)
        assert e.value.key == key

    def test_block_count(self):
        with pytest.raises(ConfigError):
            BackboneConfig((1, 2, 3), 8)


class TestHypercolumn:
    def test_zero_mlps(self):
        cfg = BackboneConfig(SMALL, 8)
        p = params64(cfg)
        for k in list(p):
            if k.startswith("hyper."):
                p[k] = T(np.zeros(p[k].shape))
        feats = encode(T(np.random.default_rng(0).random((1, 32, 32, 3))), p)
        assert np.all(build_hypercolumn(feats, p).data == 0.0)

    def test_identity_stride8_branch(self):
        cfg = BackboneConfig(SMALL, 4)  # stride-8 stage has 4 channels
        p = params64(cfg)
        for k in list(p):
            if k.startswith("hyper."):
                p[k] = T(np.zeros(p[k].shape))
        p["hyper.s8.w"] = T(np.eye(4))
        feats = encode(T(np.random.default_rng(1).random((1, 64, 32, 3))), p)
        np.testing.assert_array_equal(build_hypercolumn(feats, p).data, feats[8].data)

    @pytest.mark.parametrize("seed", range(3))
    def test_recomposition_oracle(self, seed):
        cfg = BackboneConfig(SMALL, 5)
        p = params64(cfg, seed)
        feats = encode(T(np.random.default_rng(seed).random((1, 32, 64, 3))), p)
        out = build_hypercolumn(feats, p).data[0]
        ref = np.zeros_like(out)
        for s in (2, 8, 32):
            proj = feats[s].data[0] @ p[f"hyper.s{s}.w"].data + p[f"hyper.s{s}.b"].data
            for c in range(5):
                ref[..., c] += scalar_bilinear(proj[..., c], 4, 8)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)

    def test_additive_in_branches(self):
        cfg = BackboneConfig(SMALL, 6)
        p = params64(cfg, 3)
        feats = encode(T(np.random.default_rng(3).random((2, 32, 32, 3))), p)
        total = build_hypercolumn(feats, p).data
        parts = sum(build_hypercolumn(feats, p, branches=(s,)).data for s in (2, 8, 32))
        np.testing.assert_allclose(total, parts, atol=1e-5)

    def test_channel_mismatch(self):
        cfg = BackboneConfig(SMALL, 6)
        p = params64(cfg)
        p["hyper.s2.w"] = T(np.zeros((7, 6)))
        feats = encode(T(np.zeros((1, 32, 32, 3))), p)
        with pytest.raises(ConfigError, match="hyper.s2"):
            build_hypercolumn(feats, p)

    def test_gradcheck_32x32(self):
        # two-channel layer norm is nearly a sign function; keep blocks wider
        cfg = BackboneConfig((4, 4, 4, 8, 8), 4)
        p = params64(cfg, 4)
        rng = np.random.default_rng(4)
        x = T(rng.random((1, 32, 32, 3)))
        w = T(rng.normal(size=(1, 4, 4, 4)))

        def f(img):
            return (build_hypercolumn(encode(img, p), p) * w).sum()

        res = ad.grad_check(f, x, max_checks=60)
        assert res["passed"], res
        wt = p["backbone.block0.w"]
        res = ad.grad_check(lambda t: (build_hypercolumn(encode(x, {**p, "backbone.block0.w": t}), p) * w).sum(), wt,
                            max_checks=40)
        assert res["passed"], res
