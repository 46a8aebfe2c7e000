import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from liteseg import functional as F
from liteseg.blocks import (
    SPPM, UAFM, AttentionKind, ConfigError, SegHead, channel_attention, channel_features, spatial_attention,
    spatial_features,
)
from liteseg.model import argmax_labels
from liteseg.nn import Conv2d
from liteseg.tensor import ShapeError, Tensor, no_grad


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


@pytest.fixture
def pair(rng):
    f_up = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    f_low = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    return f_up, f_low


class TestSpatialAttention:
    def test_feature_stack_has_four_channels(self, pair):
        assert spatial_features(*pair).shape == (2, 4, 8, 8)

    def test_no_max_variant_has_two_channels(self, pair):
        assert spatial_features(*pair, use_max=False).shape == (2, 2, 8, 8)

    def test_zero_conv_gives_half(self, pair, rng):
        conv = Conv2d(4, 1, 3, padding=1, bias=True, rng=rng)
        conv.weight.data[:] = 0
        alpha = spatial_attention(*pair, conv)
        assert alpha.shape == (2, 1, 8, 8)
        np.testing.assert_array_equal(alpha.data, 0.5)

    def test_constant_inputs_closed_form(self, rng):
        c1, c2 = 0.8, -1.3
        f_up = Tensor(np.full((1, 3, 5, 5), c1, np.float32))
        f_low = Tensor(np.full((1, 3, 5, 5), c2, np.float32))
        conv = Conv2d(4, 1, 3, padding=1, bias=True, rng=rng)
        conv.weight.data[:] = 0
        w = np.array([0.3, -0.7, 1.1, 0.25], np.float32)
        conv.weight.data[0, :, 1, 1] = w
        conv.bias.data[:] = 0.2
        expected = _sigmoid(w @ np.array([c1, c1, c2, c2]) + 0.2)
        np.testing.assert_allclose(spatial_attention(f_up, f_low, conv).data, expected, atol=1e-6)

    def test_channel_mismatch(self, rng):
        conv = Conv2d(4, 1, 3, padding=1, bias=True, rng=rng)
        with pytest.raises(ShapeError):
            spatial_attention(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 2, 4, 4))), conv)


class TestChannelAttention:
    def test_pooled_stack_shape(self, pair):
        assert channel_features(*pair).shape == (2, 16, 1, 1)

    def test_zero_conv_gives_half(self, pair, rng):
        conv = Conv2d(16, 4, 1, padding=0, bias=True, rng=rng)
        conv.weight.data[:] = 0
        alpha = channel_attention(*pair, conv)
        assert alpha.shape == (2, 4, 1, 1)
        np.testing.assert_array_equal(alpha.data, 0.5)

    def test_single_pixel_closed_form(self, rng):
        u = rng.standard_normal(3).astype(np.float32)
        low = rng.standard_normal(3).astype(np.float32)
        conv = Conv2d(12, 3, 1, padding=0, bias=True, rng=rng)
        conv.bias.data[:] = rng.standard_normal(3)
        got = channel_attention(Tensor(u.reshape(1, 3, 1, 1)), Tensor(low.reshape(1, 3, 1, 1)), conv).data
        z = conv.weight.data[:, :, 0, 0].astype(np.float64) @ np.concatenate([u, u, low, low]) + conv.bias.data
        np.testing.assert_allclose(got.ravel(), _sigmoid(z), atol=1e-6)

    def test_channel_mismatch(self, rng):
        conv = Conv2d(16, 4, 1, padding=0, bias=True, rng=rng)
        with pytest.raises(ShapeError):
            channel_attention(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 3, 4, 4))), conv)


class TestUAFM:
    @pytest.mark.parametrize("kind,shape", [
        (AttentionKind.SPATIAL, (2, 1, 8, 8)),
        (AttentionKind.SPATIAL_NO_MAX, (2, 1, 8, 8)),
        (AttentionKind.CHANNEL, (2, 4, 1, 1)),
    ])
    def test_alpha_shape_contract(self, pair, kind, shape):
        block = UAFM(4, 4, 4, kind)
        alpha = block.weight(*pair)
        assert alpha.shape == shape
        assert np.all((alpha.data > 0) & (alpha.data < 1))

    @pytest.mark.parametrize("value,pick", [(1.0, 0), (0.0, 1)])
    def test_forced_alpha_endpoints(self, rng, monkeypatch, value, pick):
        block = UAFM(4, 4, 4, AttentionKind.SPATIAL)
        f_high = Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32))
        f_low = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        monkeypatch.setattr(block, "weight", lambda up, low: Tensor(np.full((2, 1, 8, 8), value, np.float32)))
        out = block(f_high, f_low).data
        f_up = F.bilinear_upsample(f_high, 8, 8).data
        np.testing.assert_array_equal(out, (f_up, f_low.data)[pick])

    def test_none_matches_independent_average(self, rng):
        block = UAFM(4, 4, 4, AttentionKind.NONE)
        high = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        low = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        expected = (oracles.bilinear(high, 8, 8) + low) / 2
        np.testing.assert_allclose(block(Tensor(high), Tensor(low)).data, expected, atol=1e-6, rtol=0)

    def test_summation_adds(self, rng):
        block = UAFM(4, 4, 4, AttentionKind.NONE, summation=True)
        high = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        low = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(block(Tensor(high), Tensor(low)).data, oracles.bilinear(high, 8, 8) + low, atol=1e-6)

    def test_summation_requires_no_attention(self):
        with pytest.raises(ConfigError):
            UAFM(4, 4, 4, AttentionKind.SPATIAL, summation=True)

    @pytest.mark.parametrize("kind", list(AttentionKind))
    def test_same_input_returns_it_exactly(self, rng, kind):
        f = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        block = UAFM(4, 4, 4, kind)
        np.testing.assert_array_equal(block(f, f).data, f.data)

    @pytest.mark.parametrize("kind", [AttentionKind.SPATIAL, AttentionKind.CHANNEL])
    def test_gradients_reach_both_inputs(self, rng, kind):
        block = UAFM(4, 4, 4, kind)
        high = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        low = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
        block.astype(np.float64)
        F.sum(block(high, low)).backward()
        assert np.abs(high.grad).max() > 0
        assert np.abs(low.grad).max() > 0

    def test_projections_map_widths(self, rng):
        block = UAFM(8, 6, 4, AttentionKind.SPATIAL)
        assert block.high_proj is not None and block.low_proj is not None
        out = block(Tensor(rng.standard_normal((1, 8, 2, 4)).astype(np.float32)),
                    Tensor(rng.standard_normal((1, 6, 4, 8)).astype(np.float32)))
        assert out.shape == (1, 4, 4, 8)

    def test_width_mismatch_after_projection(self, rng):
        block = UAFM(4, 4, 4, AttentionKind.SPATIAL)
        with pytest.raises(ShapeError):
            block(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((1, 4, 4, 4))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(list(AttentionKind)))
def test_fusion_output_is_convex_combination(seed, kind):
    rng = np.random.default_rng(seed)
    block = UAFM(3, 3, 3, kind, rng=rng)
    high = Tensor((rng.standard_normal((1, 3, 3, 5)) * 4).astype(np.float32))
    low = Tensor((rng.standard_normal((1, 3, 6, 10)) * 4).astype(np.float32))
    with no_grad():
        out = block(high, low).data
    up = F.bilinear_upsample(high, 6, 10).data
    assert np.all(out >= np.minimum(up, low.data))
    assert np.all(out <= np.maximum(up, low.data))


class TestSPPM:
    def test_bins(self):
        assert tuple(SPPM.bins) == (1, 2, 4)

    def test_channels_must_shrink(self):
        with pytest.raises(ConfigError):
            SPPM(8, 8, 4)
        with pytest.raises(ConfigError):
            SPPM(8, 4, 8)

    def test_constant_input_hand_computation(self):
        block = SPPM(4, 2, 2).eval()
        for branch in block.branches:
            branch.conv.weight.data[:] = 0
            branch.conv.weight.data[[0, 1], [0, 1], 0, 0] = 1
        block.fuse.conv.weight.data[:] = 0
        block.fuse.conv.weight.data[[0, 1], [0, 1], 1, 1] = 1
        c = np.array([0.7, 1.9, -3.0, 5.0], np.float32)
        x = np.broadcast_to(c[None, :, None, None], (1, 4, 8, 8)).copy()
        # three passthrough branches summed, then two eval-mode BNs each divide by sqrt(1 + eps)
        expected = 3 * c[:2] / (1 + 1e-5)
        out = block(Tensor(x)).data
        np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape), rtol=1e-6)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(4, 12), st.integers(4, 12))
    def test_output_size_matches_input(self, h, w):
        block = SPPM(4, 3, 3).eval()
        out = block(Tensor(np.random.default_rng(h * 100 + w).standard_normal((1, 4, h, w)).astype(np.float32)))
        assert out.shape == (1, 3, h, w)

    def test_small_maps_clamp_bins(self, rng):
        out = SPPM(4, 3, 3).eval()(Tensor(rng.standard_normal((1, 4, 2, 4)).astype(np.float32)))
        assert out.shape == (1, 3, 2, 4)

    def test_batch_permutation_equivariance(self, rng):
        block = SPPM(4, 3, 3, rng=rng).eval()
        x = rng.standard_normal((4, 4, 8, 8)).astype(np.float32)
        perm = np.array([2, 0, 3, 1])
        out = block(Tensor(x)).data
        np.testing.assert_allclose(block(Tensor(x[perm])).data, out[perm], atol=1e-6)


class TestSegHead:
    def test_cityscapes_class_count(self, rng):
        head = SegHead(8, 8, 19)
        out = head(Tensor(rng.standard_normal((1, 8, 8, 16)).astype(np.float32)), 64, 128)
        assert out.shape == (1, 19, 64, 128)

    def test_uniformly_largest_channel_wins(self):
        logits = np.zeros((1, 5, 4, 6), np.float32)
        logits[:, 3] = 2.0
        np.testing.assert_array_equal(argmax_labels(logits), 3)
