import numpy as np
import pytest

from dinobench import tensor as T
from dinobench.backbone import (
    BackboneConfig,
    PRESETS,
    as_leaves,
    check_structure,
    checksum,
    embed,
    forward_backbone,
    init_params,
    num_tokens,
    patch_embed,
    projection_head,
    xca_block,
)
from dinobench.errors import ConfigError, NumericError
from dinobench.tensor import Tensor, grad_check

TINY = BackboneConfig(patch_size=4, embed_dim=8, depth=1, num_heads=2, img_size=8,
                      head_hidden=8, head_bottleneck=4, out_dim=6, init_std=0.5)


def _params(cfg=BackboneConfig(), seed=0, dtype=np.float64):
    return init_params(cfg, np.random.default_rng(seed), dtype=dtype)


def _images(b, size, c=3, seed=0):
    return np.random.default_rng(seed).random((b, size, size, c))


class TestPatchEmbed:
    def test_token_count_32_patch_8(self):
        cfg = BackboneConfig()
        tokens = patch_embed(_images(2, 32), as_leaves(_params(cfg)), cfg)
        assert tokens.shape == (2, (32 // 8) ** 2 + 1, 64) == (2, 17, 64)
        assert num_tokens(cfg, 32, 32) == 17

    def test_single_patch(self):
        cfg = BackboneConfig(patch_size=16, img_size=16)
        tokens = patch_embed(_images(1, 16), as_leaves(_params(cfg)), cfg)
        assert tokens.shape == (1, 2, 64)

    def test_local_resolution_and_padding(self):
        cfg = BackboneConfig()
        P = as_leaves(_params(cfg))
        assert patch_embed(_images(3, 16), P, cfg).shape == (3, 5, 64)
        # 20 is padded to 24 -> 3x3 patches
        assert patch_embed(_images(1, 20), P, cfg).shape == (1, 10, 64)

    def test_channel_mismatch(self):
        cfg = BackboneConfig()
        with pytest.raises(ConfigError):
            patch_embed(_images(1, 32, c=1), as_leaves(_params(cfg)), cfg)


class TestXCABlock:
    @pytest.mark.parametrize("n", [1, 2, 17, 40])
    def test_shape_preserved(self, n):
        cfg = BackboneConfig()
        x = Tensor(np.random.default_rng(n).normal(size=(2, n, 64)))
        assert xca_block(x, as_leaves(_params(cfg)), cfg, 0).shape == (2, n, 64)

    def test_attention_is_head_dim_square_independent_of_tokens(self):
        cfg = BackboneConfig()
        P = as_leaves(_params(cfg))
        for n in (5, 17, 65):
            record = []
            xca_block(Tensor(np.random.default_rng(0).normal(size=(3, n, 64))), P, cfg, 0, record)
            assert record[0].shape == (3, cfg.num_heads, cfg.head_dim, cfg.head_dim)
            np.testing.assert_allclose(record[0].sum(axis=-1), 1.0, atol=1e-10)

    def test_attention_cost_linear_in_tokens(self):
        cfg = BackboneConfig()
        P = as_leaves(_params(cfg))
        counts = {}
        for n in (8, 16, 32, 64):
            with T.count_ops() as ops:
                xca_block(Tensor(np.zeros((1, n, 64)) + 0.1), P, cfg, 0)
            counts[n] = ops.by_stage["attention"]
        for n in (8, 16, 32):
            assert abs(counts[2 * n] / counts[n] - 2.0) < 0.1
        ns = np.array(sorted(counts), dtype=float)
        ys = np.array([counts[int(n)] for n in ns], dtype=float)
        slope, intercept = np.polyfit(ns, ys, 1)
        assert np.max(np.abs(slope * ns + intercept - ys) / ys) < 1e-9  # exactly affine
        assert abs(intercept) < 0.05 * ys[0]

    def test_non_finite_reports_block(self):
        cfg = BackboneConfig()
        params = _params(cfg)
        params["backbone.blocks.2.mlp.fc2.bias"][0] = np.nan
        with pytest.raises(NumericError, match="block 2"):
            forward_backbone(_images(1, 32), as_leaves(params), cfg)


class TestForwardBackbone:
    def test_output_width(self):
        cfg = BackboneConfig()
        assert forward_backbone(_images(2, 32), as_leaves(_params(cfg)), cfg).shape == (2, 64)

    def test_paper_scale_width(self):
        cfg = PRESETS["xcit_small"]
        small = BackboneConfig(**{**cfg.to_dict(), "depth": 1, "head_hidden": 8, "head_bottleneck": 4,
                                  "out_dim": 4, "img_size": 32})
        out = forward_backbone(_images(1, 32), as_leaves(_params(small)), small)
        assert out.shape == (1, 384)

    def test_identical_images_identical_rows(self):
        cfg = BackboneConfig()
        img = _images(1, 32)
        out = forward_backbone(np.concatenate([img, img]), as_leaves(_params(cfg)), cfg).data
        assert out[0].tobytes() == out[1].tobytes()

    def test_no_cross_sample_mixing(self):
        cfg = BackboneConfig()
        params = _params(cfg, dtype=np.float32)
        imgs = _images(8, 32, seed=4).astype(np.float32)
        batch = embed(imgs, params, cfg)
        single = np.concatenate([embed(imgs[i:i + 1], params, cfg) for i in range(8)])
        assert np.max(np.abs(batch - single)) < 1e-5

    def test_depth_mismatch(self):
        with pytest.raises(ConfigError):
            forward_backbone(_images(1, 32), as_leaves(_params(BackboneConfig(depth=2))), BackboneConfig(depth=3))


class TestHead:
    def test_layer_count_and_width(self):
        cfg = BackboneConfig(out_dim=37)
        params = _params(cfg)
        layers = sorted({k.rsplit(".", 1)[0] for k in params if k.startswith("head.")})
        assert len(layers) == 4
        out = projection_head(Tensor(np.ones((3, 64))), as_leaves(params), cfg)
        assert out.shape == (3, 37)

    def test_zero_input_finite_and_deterministic(self):
        cfg = BackboneConfig()
        P = as_leaves(_params(cfg))
        a = projection_head(Tensor(np.zeros((2, 64))), P, cfg).data
        b = projection_head(Tensor(np.zeros((2, 64))), P, cfg).data
        assert np.all(np.isfinite(a)) and a.tobytes() == b.tobytes()

    def test_width_mismatch(self):
        cfg = BackboneConfig()
        with pytest.raises(ConfigError):
            projection_head(Tensor(np.zeros((2, 63))), as_leaves(_params(cfg)), cfg)


class TestParameters:
    def test_student_teacher_isomorphic(self):
        a, b = _params(seed=1), _params(seed=2)
        assert list(a) == list(b)
        check_structure(a, b)
        assert checksum(a) != checksum(b)

    def test_structure_mismatch_names_parameter(self):
        a = _params(BackboneConfig(embed_dim=32, num_heads=4))
        with pytest.raises(ConfigError, match="backbone.patch_embed.weight"):
            check_structure(a, _params())

    def test_init_statistics(self):
        p = _params(seed=3)
        w = p["backbone.blocks.0.mlp.fc1.weight"]
        assert np.abs(w).max() <= 0.04 + 1e-12
        assert abs(w.std() - 0.02) < 0.003
        assert not p["backbone.blocks.0.mlp.fc1.bias"].any()
        np.testing.assert_array_equal(p["backbone.blocks.1.attn.temperature"], 1.0)


def test_composite_gradient_check():
    """One-block backbone + head + a distillation-style loss against central differences."""
    cfg = TINY
    rng = np.random.default_rng(5)
    params = init_params(cfg, rng, dtype=np.float64)
    imgs = rng.random((2, 8, 8, 3))
    target = T.softmax_t(Tensor(rng.normal(size=(2, cfg.out_dim))), 0.5).data

    worst = 0.0
    for name in params:
        def fn(p, name=name):
            P = as_leaves(params)
            P[name] = p
            logits = projection_head(forward_backbone(imgs, P, cfg), P, cfg)
            return -(Tensor(target) * T.log(T.softmax_t(logits, 0.1), eps=1e-12)).sum() / 2.0

        worst = max(worst, grad_check(fn, params[name], eps=1e-5))
    assert worst < 1e-3
