import warnings

import pytest
import torch

from malp import metrics as M
from malp.localization import (ArchConfig, ConvHead, MapClassifier, SharedTrunk, TransformerBranch,
                               count_conv_layers, localization_loss)
from malp.model import MaLP, PassiveLocalizer
from oracles import gradient_relative_error

LAMS = (50.0, 15.0, 20.0, 50.0)
SMALL = ArchConfig(trunk_widths=(4, 4, 4, 4, 4), head_widths=(4, 4, 4, 4), patch_size=8, embed_dim=16,
                   depth=1, num_heads=2, classifier_widths=(4,) * 9, classifier_fc=(8, 8))


def _pair(seed, dtype=torch.float64, size=8):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(2, 1, size, size, generator=g, dtype=dtype) * 0.8 + 0.1
    gt = torch.rand(2, 1, size, size, generator=g, dtype=dtype)
    return pred, gt


class TestLossValues:
    def test_encrypted_closed_form(self):
        pred = torch.full((1, 1, 11, 11), 0.1, dtype=torch.float64)
        gt = torch.ones_like(pred)
        loss = localization_loss(pred, gt, True, *LAMS)
        # ||p||^2 = 121 * 0.01; CS of two constant maps is 1
        assert float(loss) == pytest.approx(50 * 1.21 + 15 * 1.0)

    def test_fake_perfect_prediction_is_zero(self):
        gt = torch.rand(1, 1, 16, 16, dtype=torch.float64) + 0.1
        assert float(localization_loss(gt.clone(), gt, False, *LAMS)) == pytest.approx(0.0, abs=1e-9)

    def test_per_sample_selection(self):
        pred, gt = _pair(0, size=16)
        mixed = localization_loss(pred, gt, torch.tensor([True, False]), *LAMS)
        a = localization_loss(pred[:1], gt[:1], True, *LAMS)
        b = localization_loss(pred[1:], gt[1:], False, *LAMS)
        assert float(mixed) == pytest.approx((float(a) + float(b)) / 2)

    def test_zero_ground_truth_warns_and_stays_finite(self):
        pred = torch.rand(1, 1, 16, 16)
        with pytest.warns(RuntimeWarning):
            loss = localization_loss(pred, torch.zeros_like(pred), False, *LAMS)
        assert torch.isfinite(loss)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            localization_loss(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 9, 9), True, *LAMS)


class TestLossGradients:
    @pytest.mark.parametrize("encrypted", [True, False])
    def test_against_central_differences(self, encrypted):
        pred, gt = _pair(1)
        err = gradient_relative_error(lambda p: localization_loss(p, gt, encrypted, *LAMS, ssim_window=7), pred)
        assert err < 1e-4


class TestArchitecture:
    def test_ten_convolutions_in_each_map_branch(self):
        arch = ArchConfig()
        trunk = SharedTrunk(arch)
        assert count_conv_layers(trunk) + count_conv_layers(ConvHead(trunk.out_channels, arch, True)) == 10

    def test_cnn_map_shape_and_range(self):
        model = MaLP(32, SMALL, seed=0).eval()
        out = model(torch.rand(2, 3, 32, 32))
        assert out["cnn_map"].shape == (2, 1, 32, 32)
        assert out["transformer_map"].shape == (2, 1, 32, 32)
        assert out["recovered"].shape == (2, 32, 32)
        assert out["logit"].shape == (2,)
        for key in ("cnn_map", "transformer_map"):
            assert out[key].min() >= 0 and out[key].max() <= 1

    def test_fully_convolutional_inference(self):
        model = MaLP(32, SMALL, seed=0).eval()
        out = model.infer(torch.rand(1, 3, 48, 40))
        assert out["map"].shape == (1, 1, 48, 40)
        assert out["recovered"].shape == (1, 48, 40)

    def test_transformer_rejects_indivisible_resolution(self):
        with pytest.raises(ValueError):
            TransformerBranch(30, SMALL)

    def test_classifier_rejects_nan(self):
        clf = MapClassifier(SMALL)
        with pytest.raises(ValueError):
            clf(torch.full((1, 1, 16, 16), float("nan")))

    def test_rgb_required(self):
        with pytest.raises(ValueError):
            SharedTrunk(SMALL)(torch.rand(1, 1, 16, 16))

    def test_same_seed_same_parameters(self):
        a, b = MaLP(16, SMALL, seed=3), MaLP(16, SMALL, seed=3)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_construction_leaves_global_rng_alone(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        MaLP(16, SMALL, seed=5)
        assert torch.equal(torch.rand(3), expected)

    def test_passive_output(self):
        net = PassiveLocalizer(16, SMALL, depth=3).eval()
        assert net(torch.rand(2, 3, 16, 16)).shape == (2, 1, 16, 16)
