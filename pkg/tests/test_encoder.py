import pytest
import torch

from docseg.encoder import MaskFeatureFuser, MultiScaleFeatures, PyramidEncoder
from fdcheck import finite_difference_check


def make_encoder(channels=16, num_heads=2, seed=0):
    torch.manual_seed(seed)
    return PyramidEncoder(channels=channels, num_heads=num_heads).eval()


def random_features(shapes, channels=8, batch=1, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    levels = [
        torch.randn(batch, h * w, channels, generator=g, dtype=dtype) for h, w in shapes
    ]
    return MultiScaleFeatures(levels=levels, spatial_shapes=list(shapes))


class TestEncode:
    def test_256_input_level_shapes(self):
        enc = make_encoder(channels=64, num_heads=8)
        with torch.no_grad():
            feats = enc(torch.rand(1, 3, 256, 256))
        assert feats.spatial_shapes == [(8, 8), (16, 16), (32, 32), (64, 64)]
        for level, (h, w) in zip(feats.levels, feats.spatial_shapes):
            assert level.shape == (1, h * w, 64)

    def test_zero_image_finite(self):
        enc = make_encoder()
        with torch.no_grad():
            feats = enc(torch.zeros(1, 3, 64, 64))
        for level in feats.levels:
            assert torch.isfinite(level).all()

    def test_deterministic(self):
        enc = make_encoder()
        img = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            a = enc(img)
            b = enc(img.clone())
        for la, lb in zip(a.levels, b.levels):
            assert torch.equal(la, lb)

    def test_non_multiple_of_32_rejected(self):
        enc = make_encoder()
        with pytest.raises(ValueError, match="pad"):
            enc(torch.rand(1, 3, 100, 64))

    @pytest.mark.parametrize("side", [64, 96, 160, 320])
    def test_shape_contract_over_sizes(self, side):
        enc = make_encoder(channels=8, num_heads=1)
        with torch.no_grad():
            feats = enc(torch.rand(1, 3, side, side // 2 * 2 if side % 64 else side))
        h = side
        assert feats.spatial_shapes == [(h // s, feats.spatial_shapes[i][1]) for i, s in enumerate((32, 16, 8, 4))]
        strides = [h // hh for hh, _ in feats.spatial_shapes]
        assert strides == [32, 16, 8, 4]

    def test_large_input_windowed_attention(self):
        # 1024-wide inputs exceed the window cap; shapes must still hold
        enc = make_encoder(channels=8, num_heads=1)
        with torch.no_grad():
            feats = enc(torch.rand(1, 3, 64, 1024))
        assert feats.spatial_shapes == [(2, 32), (4, 64), (8, 128), (16, 256)]


class TestFuse:
    def test_zero_levels_constant_output(self):
        torch.manual_seed(0)
        fuser = MaskFeatureFuser(channels=8).eval()
        feats = random_features([(1, 1), (2, 2), (4, 4), (8, 8)], channels=8)
        for lv in feats.levels:
            lv.zero_()
        with torch.no_grad():
            fused = fuser(feats)
        assert fused.spatial_shape == (8, 8)
        spread = fused.values.max(dim=1).values - fused.values.min(dim=1).values
        assert spread.abs().max() < 1e-6

    def test_output_shape_matches_finest(self):
        torch.manual_seed(0)
        fuser = MaskFeatureFuser(channels=64).eval()
        feats = random_features([(8, 8), (16, 16), (32, 32), (64, 64)], channels=64)
        with torch.no_grad():
            fused = fuser(feats)
        assert fused.values.shape == (1, 4096, 64)
        assert fused.spatial_shape == (64, 64)

    def test_coarsest_level_reaches_every_pixel(self):
        torch.manual_seed(1)
        fuser = MaskFeatureFuser(channels=8).eval()
        feats = random_features([(2, 2), (4, 4), (8, 8), (16, 16)], channels=8, seed=5)
        with torch.no_grad():
            before = fuser(feats).values
            feats.levels[0] = feats.levels[0] + 0.1 * torch.randn_like(feats.levels[0])
            after = fuser(feats).values
        changed_per_pixel = (before != after).any(dim=-1)
        assert changed_per_pixel.all()

    def test_channel_mismatch_rejected(self):
        fuser = MaskFeatureFuser(channels=8)
        feats = random_features([(1, 1), (2, 2), (4, 4), (8, 8)], channels=16)
        with pytest.raises(ValueError, match="width"):
            fuser(feats)

    def test_level_count_enforced(self):
        with pytest.raises(ValueError, match="4 feature levels"):
            MultiScaleFeatures(levels=[torch.zeros(1, 4, 8)], spatial_shapes=[(2, 2)])


class TestGradients:
    def test_fuse_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        fuser = MaskFeatureFuser(channels=8).double().eval()
        feats = random_features(
            [(1, 1), (2, 2), (4, 4), (8, 8)], channels=8, seed=2, dtype=torch.float64
        )
        g = torch.Generator().manual_seed(9)
        probe = torch.randn(1, 64, 8, generator=g, dtype=torch.float64)

        def loss_fn(*levels):
            out = fuser(MultiScaleFeatures(levels=list(levels), spatial_shapes=feats.spatial_shapes))
            return (out.values * probe).sum()

        err = finite_difference_check(loss_fn, feats.levels, max_coords=120)
        assert err < 1e-4, f"worst relative error {err}"

    def test_encoder_input_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        enc = PyramidEncoder(channels=8, num_heads=2).double().eval()
        g = torch.Generator().manual_seed(4)
        img = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
        probe = torch.randn(1, 64, 8, generator=g, dtype=torch.float64)

        def loss_fn(x):
            feats = enc(x)
            return (feats.levels[-1] * probe).sum() + sum(lv.sum() for lv in feats.levels[:-1])

        err = finite_difference_check(loss_fn, [img], max_coords=60)
        assert err < 1e-4, f"worst relative error {err}"
