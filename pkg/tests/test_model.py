import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixnet import ops
from mixnet.config import ModelConfig
from mixnet.errors import ConfigError, InputError, SchemaMismatchError
from mixnet.model import (config_from_weights, downsampler, forward, init_weights, param_breakdown,
                          param_count, param_shapes, upsampler)
from mixnet.tensor import Tensor

import oracles

TINY = ModelConfig(num_fmb=2, channels=8, gfml_size=4, lfml_reduction=2)


def random_config(rng):
    c = int(rng.integers(1, 9)) * 2
    stages = "".join(a for a in "CWH" if rng.random() < 0.7) or "C"
    return ModelConfig(
        num_fmb=int(rng.integers(0, 5)), channels=c, gfml_size=int(rng.integers(1, 17)),
        lfml_reduction=int(rng.choice([r for r in (1, 2) if c % r == 0])),
        downsample_factor=int(rng.integers(1, 4)), gfml_stages=stages,
        use_gfml=bool(rng.random() < 0.8), use_lfml=bool(rng.random() < 0.8),
        use_ffl=bool(rng.random() < 0.8))


class TestSamplers:
    def test_shapes_default(self):
        cfg = ModelConfig()
        w = init_weights(cfg.replace(num_fmb=0))
        f = downsampler(Tensor(np.zeros((1, 3, 64, 64))), w, cfg)
        assert f.shape == (1, 48, 32, 32)
        assert upsampler(f, w, cfg).shape == (1, 3, 64, 64)

    def test_factor_one_is_plain_conv(self, rng):
        cfg = ModelConfig(num_fmb=0, channels=5, lfml_reduction=1, downsample_factor=1)
        w = init_weights(cfg)
        x = rng.standard_normal((1, 3, 6, 6))
        f = downsampler(Tensor(x), w, cfg)
        assert f.shape == (1, 5, 6, 6)
        ref = ops.conv3x3(Tensor(x), w["down.conv.weight"], w["down.conv.bias"])
        assert np.array_equal(f.data, ref.data)

    def test_space_to_depth_matches_index_oracle(self, rng):
        x = rng.standard_normal((2, 3, 6, 4)).astype(np.float32)
        for d in (1, 2):
            assert np.array_equal(ops.space_to_depth(Tensor(x), d).data, oracles.space_to_depth(x, d))
        y = rng.standard_normal((1, 12, 2, 3)).astype(np.float32)
        assert np.array_equal(ops.depth_to_space(Tensor(y), 2).data, oracles.depth_to_space(y, 2))

    def test_checkerboard_gives_constant_channels(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.float32)
        x = np.broadcast_to(board, (1, 3, 8, 8))
        out = ops.space_to_depth(Tensor(x), 2).data
        assert out.shape == (1, 12, 4, 4)
        for k in range(12):
            assert np.unique(out[0, k]).size == 1

    def test_rearrangements_are_inverse(self):
        x = np.arange(48, dtype=np.float32).reshape(1, 12, 2, 2)
        back = ops.space_to_depth(ops.depth_to_space(Tensor(x), 2), 2)
        assert np.array_equal(back.data, x)
        img = np.arange(48, dtype=np.float32).reshape(1, 3, 4, 4)
        assert np.array_equal(ops.depth_to_space(ops.space_to_depth(Tensor(img), 2), 2).data, img)

    def test_indivisible_input(self):
        with pytest.raises(InputError, match="divisible"):
            forward(Tensor(np.zeros((1, 3, 7, 8))), init_weights(TINY), TINY)


class TestForward:
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_shape_preserved(self, d, rng):
        cfg = TINY.replace(downsample_factor=d)
        x = Tensor(rng.random((2, 3, 6 * d, 4 * d)))
        assert forward(x, init_weights(cfg), cfg).shape == x.shape

    def test_default_config_at_training_crop(self, rng):
        cfg = ModelConfig(num_fmb=1)
        x = Tensor(rng.random((1, 3, 512, 512)))
        assert forward(x, init_weights(cfg), cfg).shape == (1, 3, 512, 512)

    def test_output_not_clamped(self, rng):
        w = init_weights(TINY)
        w["up.conv.bias"].data[:] = 5.0
        out = forward(Tensor(rng.random((1, 3, 8, 8))), w, TINY)
        assert out.data.max() > 1.0

    def test_zero_weights_give_bias_chain(self, rng):
        w = init_weights(TINY)
        for k, p in w.items():
            if k.endswith(".weight"):
                p.data[:] = 0
            elif k.endswith(".bias"):
                p.data[:] = rng.standard_normal(p.shape)
        out = forward(Tensor(rng.random((2, 3, 8, 6))), w, TINY).data
        d = TINY.downsample_factor
        up_bias = w["up.conv.bias"].data.reshape(1, 3 * d * d, 1, 1)
        expected = ops.depth_to_space(Tensor(np.broadcast_to(up_bias, (2, 12, 4, 3))), d).data
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-6)

    def test_zero_fmb_weights_make_an_affine_map(self, rng, f64):
        # FMB weights zero and identity LN: each block adds fuse.bias + ffl.conv1.bias,
        # so the network is up(2*down(x) + sum of block biases).
        cfg = TINY
        w = init_weights(cfg, seed=3)
        shift = np.zeros(cfg.channels)
        for k, p in w.items():
            if not k.startswith("fmb."):
                continue
            if k.endswith(".weight"):
                p.data[:] = 0
            elif k.endswith(".bias"):
                p.data[:] = rng.standard_normal(p.shape)
                if k.endswith("fuse.bias") or k.endswith("ffl.conv1.bias"):
                    shift += p.data
        x = Tensor(rng.random((1, 3, 8, 8)))
        f0 = downsampler(x, w, cfg)
        feat = Tensor(2 * f0.data + shift[None, :, None, None])
        expected = upsampler(feat, w, cfg).data
        np.testing.assert_allclose(forward(x, w, cfg).data, expected, rtol=1e-12, atol=1e-12)


class TestParamCount:
    def test_default_value(self):
        cfg = ModelConfig()
        assert param_count(cfg) == init_weights(cfg).num_scalars() == 514_076

    def test_empty_stack_counts_samplers_only(self):
        cfg = ModelConfig(num_fmb=0)
        assert param_count(cfg) == (27 * 4 * 48 + 48) + (48 * 12 * 9 + 12)

    def test_twenty_random_configs(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cfg = random_config(rng)
            assert param_count(cfg) == init_weights(cfg).num_scalars(), cfg

    def test_breakdown_sums_to_total(self):
        cfg = ModelConfig()
        b = param_breakdown(cfg)
        assert sum(b.values()) == param_count(cfg)
        assert list(b)[0] == "down" and list(b)[-1] == "up"


class TestInit:
    def test_deterministic(self):
        assert init_weights(TINY, 5).equals(init_weights(TINY, 5))
        assert not init_weights(TINY, 5).equals(init_weights(TINY, 6))

    def test_biases_zero_and_norm_identity(self):
        w = init_weights(TINY)
        for k, p in w.items():
            if k.endswith(".bias") or k.endswith(".beta"):
                assert not p.data.any()
            if k.endswith(".gamma"):
                assert np.all(p.data == 1)

    def test_std_matches_fan_in_formula(self):
        cfg = ModelConfig(num_fmb=1, channels=64)
        w = init_weights(cfg)
        # Pre-GELU conv: bound sqrt(6 / fan_in), std = bound / sqrt(3).
        conv3 = w["fmb.0.ffl.conv3.weight"].data
        assert abs(conv3.std() / np.sqrt(2 / (64 * 9)) - 1) < 0.2
        # Pre-sigmoid conv: gain 1.
        fuse = w["fmb.0.fuse.weight"].data
        assert abs(fuse.std() / np.sqrt(1 / 128) - 1) < 0.2

    def test_name_set_matches_schema(self):
        w = init_weights(TINY)
        assert list(w) == list(param_shapes(TINY))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(channels=0), dict(channels=6, lfml_reduction=4),
                                    dict(gfml_stages="CX"), dict(gfml_stages="CC"),
                                    dict(gfml_stages=""), dict(downsample_factor=0), dict(num_fmb=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_channels_need_not_divide_by_samplers(self):
        ModelConfig(channels=10, lfml_reduction=5, downsample_factor=3)

    def test_stage_order_is_canonical(self):
        assert ModelConfig(gfml_stages="HC").gfml_stages == "CH"

    def test_config_round_trips_through_weights(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            cfg = random_config(rng)
            got = config_from_weights(init_weights(cfg).arrays())
            assert param_shapes(got) == param_shapes(cfg)

    def test_missing_down_conv(self):
        arrays = init_weights(TINY).arrays()
        del arrays["down.conv.weight"]
        with pytest.raises(SchemaMismatchError):
            config_from_weights(arrays)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_forward_shape_property(d, hb, wb, seed):
    cfg = ModelConfig(num_fmb=1, channels=4, gfml_size=3, lfml_reduction=2, downsample_factor=d)
    x = Tensor(np.random.default_rng(seed).random((1, 3, hb * d, wb * d)))
    out = forward(x, init_weights(cfg, seed % 100), cfg)
    assert out.shape == x.shape and np.all(np.isfinite(out.data))
