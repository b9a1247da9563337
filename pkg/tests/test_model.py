import numpy as np
import pytest

from iseg import autodiff as ad
from iseg.autodiff import Tensor
from iseg.errors import DimMismatch, DivisibilityViolation
from iseg.masks import Click, encode_clicks
from iseg.model import ModelConfig, encoder_forward, expected_shapes, \
    forward, forward_tensor, fuse, init_weights, mlp_decoder, \
    patch_embed_clicks, patch_embed_image, patch_merging, upsample_bilinear, \
    validate_weights, window_attention


def zero_weights(config):
    return {name: Tensor(np.zeros(shape), requires_grad=True)
            for name, shape in expected_shapes(config).items()}


class TestPatchEmbed:
    def test_token_grid_shape(self, rng):
        cfg = ModelConfig()
        w = init_weights(cfg, seed=0)
        tokens = patch_embed_image(rng.random((64, 64)), w, cfg)
        assert tokens.data.shape == (16, 16, 32)

    def test_zero_image_zero_bias(self, tiny_config, tiny_weights):
        tokens = patch_embed_image(np.zeros((16, 16)), tiny_weights, tiny_config)
        np.testing.assert_array_equal(tokens.data, 0.0)

    def test_constant_image_identical_tokens(self, tiny_config, tiny_weights):
        tokens = patch_embed_image(np.full((16, 16), 0.37), tiny_weights,
                                   tiny_config).data
        np.testing.assert_allclose(
            tokens, np.broadcast_to(tokens[0, 0], tokens.shape), atol=1e-12)

    def test_indivisible_dims_rejected(self, tiny_config, tiny_weights):
        with pytest.raises(DivisibilityViolation):
            patch_embed_image(np.zeros((15, 16)), tiny_weights, tiny_config)

    def test_click_embed_zero_map(self, tiny_config, tiny_weights):
        tokens = patch_embed_clicks(np.zeros((16, 16, 2)), tiny_weights,
                                    tiny_config)
        np.testing.assert_array_equal(tokens.data, 0.0)

    def test_click_embed_shape_matches_image_tokens(self, tiny_config,
                                                    tiny_weights):
        img = patch_embed_image(np.zeros((16, 16)), tiny_weights, tiny_config)
        clk = patch_embed_clicks(np.zeros((16, 16, 2)), tiny_weights,
                                 tiny_config)
        assert img.data.shape == clk.data.shape

    def test_click_embed_disk_support(self, tiny_config, tiny_weights):
        cm = encode_clicks([Click(8, 8, True)], 16, 16,
                           radius=tiny_config.click_radius)
        tokens = patch_embed_clicks(cm, tiny_weights, tiny_config).data
        p = tiny_config.patch_size
        covered = cm.reshape(16 // p, p, 16 // p, p, 2).any(axis=(1, 3, 4))
        token_nonzero = np.abs(tokens).sum(axis=-1) > 0
        np.testing.assert_array_equal(token_nonzero, covered)


class TestFuse:
    def test_zero_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4, 8)))
        z = Tensor(np.zeros((4, 4, 8)))
        assert fuse(x, z).data.tobytes() == x.data.tobytes()

    def test_commutative(self, rng):
        x = Tensor(rng.normal(size=(4, 4, 8)))
        y = Tensor(rng.normal(size=(4, 4, 8)))
        assert fuse(x, y).data.tobytes() == fuse(y, x).data.tobytes()

    def test_ablation_equals_image_only_path(self, tiny_config, tiny_weights,
                                             rng):
        """Zero click map + zero click-embedding bias (the initialized value)
        reproduces the image-only network output bit-exactly."""
        image = rng.random((16, 16))
        zero_map = np.zeros((16, 16, 2))
        full = forward(image, zero_map, tiny_weights, tiny_config)

        with ad.no_grad():
            tokens = patch_embed_image(image, tiny_weights, tiny_config)
            feats = encoder_forward(tokens, tiny_weights, tiny_config)
            logits = mlp_decoder(feats, tiny_weights, tiny_config)
            logits = upsample_bilinear(logits, 16, 16)
            image_only = ad.sigmoid(logits).data
        assert full.tobytes() == image_only.tobytes()


def identity_attn_weights(d):
    eye = np.eye(d)
    return {
        "qkv_weight": Tensor(np.concatenate([eye, eye, eye], axis=1)),
        "q_bias": Tensor(np.zeros(d)),
        "v_bias": Tensor(np.zeros(d)),
        "proj_weight": Tensor(eye),
        "proj_bias": Tensor(np.zeros(d)),
    }


def random_attn_weights(d, rng):
    return {
        "qkv_weight": Tensor(rng.normal(scale=0.2, size=(d, 3 * d))),
        "q_bias": Tensor(rng.normal(scale=0.05, size=(d,))),
        "v_bias": Tensor(rng.normal(scale=0.05, size=(d,))),
        "proj_weight": Tensor(rng.normal(scale=0.2, size=(d, d))),
        "proj_bias": Tensor(rng.normal(scale=0.05, size=(d,))),
    }


class TestWindowAttention:
    def test_single_token_window_identity_projections(self, rng):
        x = Tensor(rng.normal(size=(3, 3, 4)))
        out = window_attention(x, 1, 1, identity_attn_weights(4), shift=0)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(8, 8, 6)))
        _, attn = window_attention(x, 4, 2, random_attn_weights(6, rng),
                                   shift=2, return_attn=True)
        sums = attn.data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_shift_zero_is_plain_windowed(self, rng):
        x = Tensor(rng.normal(size=(8, 8, 4)))
        w = random_attn_weights(4, rng)
        a = window_attention(x, 4, 2, w, shift=0)
        b = window_attention(x, 4, 2, w, shift=0)
        assert a.data.tobytes() == b.data.tobytes()

    def test_single_window_shift_equals_unshifted(self, rng):
        x = Tensor(rng.normal(size=(4, 4, 4)))
        w = random_attn_weights(4, rng)
        unshifted = window_attention(x, 4, 2, w, shift=0)
        shifted = window_attention(x, 4, 2, w, shift=2)
        assert unshifted.data.tobytes() == shifted.data.tobytes()

    def test_masked_shift_blocks_wrapped_pairs(self, rng):
        # tokens from opposite grid edges share a window after the shift but
        # must receive zero attention weight
        x = Tensor(rng.normal(size=(8, 8, 4)))
        _, attn = window_attention(x, 4, 1, random_attn_weights(4, rng),
                                   shift=2, return_attn=True)
        a = attn.data
        assert a.shape == (4, 1, 16, 16)
        assert a.min() >= 0.0
        assert (a == 0.0).any()

    def test_divisibility(self, rng):
        x = Tensor(rng.normal(size=(6, 6, 4)))
        with pytest.raises(DivisibilityViolation):
            window_attention(x, 4, 1, random_attn_weights(4, rng))

    def test_bad_shift(self, rng):
        x = Tensor(rng.normal(size=(8, 8, 4)))
        with pytest.raises(ValueError):
            window_attention(x, 4, 1, random_attn_weights(4, rng), shift=4)


class TestPatchMerging:
    def test_shape(self, rng):
        x = Tensor(rng.normal(size=(16, 16, 32)))
        w = Tensor(rng.normal(size=(128, 64)))
        b = Tensor(np.zeros(64))
        assert patch_merging(x, w, b).data.shape == (8, 8, 64)

    def test_zeros(self):
        out = patch_merging(Tensor(np.zeros((4, 4, 8))),
                            Tensor(np.zeros((32, 16))), Tensor(np.zeros(16)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_grid_stays_constant(self, rng):
        x = Tensor(np.tile(rng.normal(size=8), (4, 4, 1)))
        w = Tensor(rng.normal(size=(32, 16)))
        b = Tensor(rng.normal(size=16))
        out = patch_merging(x, w, b).data
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape),
                                   atol=1e-12)

    def test_odd_grid_rejected(self, rng):
        with pytest.raises(DivisibilityViolation):
            patch_merging(Tensor(np.zeros((3, 4, 8))),
                          Tensor(np.zeros((32, 16))), Tensor(np.zeros(16)))


class TestDecoder:
    def test_output_matches_stage1_grid(self, tiny_config, tiny_weights, rng):
        feats = [Tensor(rng.normal(size=(8, 8, 4))),
                 Tensor(rng.normal(size=(4, 4, 8)))]
        logits = mlp_decoder(feats, tiny_weights, tiny_config)
        assert logits.data.shape == (8, 8)

    def test_zero_features_zero_logits(self, tiny_config):
        w = zero_weights(tiny_config)
        feats = [Tensor(np.zeros((8, 8, 4))), Tensor(np.zeros((4, 4, 8)))]
        np.testing.assert_array_equal(mlp_decoder(feats, w, tiny_config).data,
                                      0.0)

    def test_grad_check(self, tiny_config, rng):
        w = init_weights(tiny_config, seed=3)
        feats_data = [rng.normal(size=(8, 8, 4)), rng.normal(size=(4, 4, 8))]
        params = [w[k] for k in ["decoder.proj0.weight", "decoder.proj1.weight",
                                 "decoder.fuse.weight", "decoder.head.weight",
                                 "decoder.head.bias"]]

        def f():
            feats = [Tensor(fd) for fd in feats_data]
            out = mlp_decoder(feats, w, tiny_config)
            return ad.sum_all(ad.mul(out, out))

        assert ad.grad_check(f, params, h=1e-5).max_rel_error < 1e-4


class TestForward:
    def test_output_shape_and_range(self, rng):
        cfg = ModelConfig()
        w = init_weights(cfg, seed=0)
        prob = forward(rng.random((64, 64)), np.zeros((64, 64, 2)), w, cfg)
        assert prob.shape == (64, 64)
        assert (prob > 0).all() and (prob < 1).all()

    def test_deterministic(self, tiny_config, tiny_weights, rng):
        image = rng.random((16, 16))
        cm = encode_clicks([Click(5, 5, True)], 16, 16, 2)
        a = forward(image, cm, tiny_weights, tiny_config)
        b = forward(image, cm, tiny_weights, tiny_config)
        assert a.tobytes() == b.tobytes()

    def test_larger_multiple_of_quantum_accepted(self, tiny_config,
                                                 tiny_weights, rng):
        prob = forward(rng.random((24, 32)), np.zeros((24, 32, 2)),
                       tiny_weights, tiny_config)
        assert prob.shape == (24, 32)

    def test_validate_weights(self, tiny_config, tiny_weights):
        validate_weights(tiny_weights, tiny_config)
        broken = dict(tiny_weights)
        del broken["decoder.head.bias"]
        with pytest.raises(DimMismatch):
            validate_weights(broken, tiny_config)


SHAPE_SWEEP = [
    ModelConfig(patch_size=2, embed_dim=4, depths=(1,), heads=(2,),
                window_size=2, mlp_ratio=2, decoder_dim=4,
                input_h=4, input_w=4, click_radius=1),
    ModelConfig(patch_size=2, embed_dim=6, depths=(1, 1), heads=(1, 3),
                window_size=2, mlp_ratio=2, decoder_dim=5,
                input_h=8, input_w=16, click_radius=1),
    ModelConfig(patch_size=4, embed_dim=8, depths=(2, 1), heads=(2, 4),
                window_size=2, mlp_ratio=3, decoder_dim=8,
                input_h=16, input_w=16, click_radius=2),
    ModelConfig(patch_size=2, embed_dim=4, depths=(1, 1, 1), heads=(1, 2, 4),
                window_size=2, mlp_ratio=2, decoder_dim=4,
                input_h=16, input_w=32, click_radius=1),
]


@pytest.mark.parametrize("cfg", SHAPE_SWEEP, ids=lambda c: f"{c.input_h}x{c.input_w}")
def test_shape_contracts_over_valid_configs(cfg, rng):
    w = init_weights(cfg, seed=1)
    image = rng.random((cfg.input_h, cfg.input_w))
    prob = forward(image, np.zeros((cfg.input_h, cfg.input_w, 2)), w, cfg)
    assert prob.shape == (cfg.input_h, cfg.input_w)

    tokens = fuse(patch_embed_image(image, w, cfg),
                  patch_embed_clicks(np.zeros((cfg.input_h, cfg.input_w, 2)),
                                     w, cfg))
    feats = encoder_forward(tokens, w, cfg)
    for s, f in enumerate(feats):
        scale = cfg.patch_size * (2 ** s)
        assert f.data.shape == (cfg.input_h // scale, cfg.input_w // scale,
                                cfg.stage_dim(s))


def test_invalid_config_rejected():
    with pytest.raises(DivisibilityViolation):
        ModelConfig(input_h=60, input_w=64)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(depths=(2, 2), heads=(2,))


def test_end_to_end_grad_check_small(rng):
    """Fast regression check on a single-stage 8x8 model; the full 16x16
    two-stage sweep lives in the acceptance suite."""
    from conftest import generic_weights

    cfg = ModelConfig(patch_size=2, embed_dim=4, depths=(1,), heads=(2,),
                      window_size=2, mlp_ratio=2, decoder_dim=4,
                      input_h=8, input_w=8, click_radius=1)
    w = generic_weights(cfg, seed=5)
    image = rng.random((8, 8))
    cm = encode_clicks([Click(4, 4, True)], 8, 8, 1)
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:6, 2:6] = 1

    from iseg.training import nfl

    params = [w["stage0.block0.attn.qkv.weight"], w["embed.clicks.weight"],
              w["decoder.head.weight"], w["stage0.block0.norm1.gamma"]]

    def f():
        probs = forward_tensor(image, cm, w, cfg)
        return nfl(probs, gt, 2.0)

    report = ad.grad_check(f, params, h=1e-5)
    assert report.max_rel_error < 1e-4, report
