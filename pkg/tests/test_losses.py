"""Loss closed forms, exact zeros, and weighting properties."""

import numpy as np
import pytest
import torch

from fewshot_heads.errors import ConfigurationError
from fewshot_heads.losses import (
    ExtractorTap,
    LossWeights,
    adversarial_loss_generator,
    content_loss,
    feature_matching,
    get_extractor,
    hinge_loss_discriminator,
    match_loss,
    total_meta_objective,
)

IDENTITY = (ExtractorTap("identity", (0,), 1.0),)


def _image(seed=0, shape=(1, 3, 16, 16)):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen) * 2 - 1


class TestContentLoss:
    def test_identical_images_give_exact_zero(self):
        x = _image()
        spec = (ExtractorTap("identity", (0,), 1.0), ExtractorTap("random_pyramid", (0, 1, 2, 3), 0.15))
        assert content_loss(x, x.clone(), spec).item() == 0.0

    def test_paper_weights_accepted_verbatim(self):
        spec = (
            ExtractorTap("random_pyramid", (0, 1, 2, 3), 1.5e-1),
            ExtractorTap("random_pyramid", (0, 1, 2), 2.5e-2),
        )
        value = content_loss(_image(0), _image(1), spec)
        assert torch.isfinite(value)
        assert spec[0].weight == 1.5e-1 and spec[1].weight == 2.5e-2

    def test_constant_offset_identity_extractor_closed_form(self):
        x = _image(2).double()
        y = x + 0.2
        w = 3.0
        out = content_loss(x, y, (ExtractorTap("identity", (0,), w),))
        assert abs(out.item() - w * 0.2) < 1e-9

    def test_weight_scaling_is_exactly_linear(self):
        x, y = _image(3), _image(4)
        spec = (ExtractorTap("identity", (0,), 0.7), ExtractorTap("random_pyramid", (0, 1), 0.3))
        doubled = tuple(ExtractorTap(t.extractor, t.layers, 2.0 * t.weight) for t in spec)
        assert content_loss(x, y, doubled).item() == 2.0 * content_loss(x, y, spec).item()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            content_loss(_image(), _image(shape=(1, 3, 8, 8)), IDENTITY)

    def test_unknown_extractor_named_in_error(self):
        with pytest.raises(ConfigurationError, match="no_such_net"):
            content_loss(_image(), _image(1), (ExtractorTap("no_such_net", (0,), 1.0),))

    def test_unavailable_pretrained_extractor_named_in_error(self, monkeypatch):
        monkeypatch.delenv("FSH_CACHE", raising=False)
        with pytest.raises(ConfigurationError, match="vgg19"):
            get_extractor("vgg19")


class TestFeatureMatching:
    def test_identical_stacks_give_exact_zero(self):
        feats = [_image(i) for i in range(3)]
        assert feature_matching(feats, [f.clone() for f in feats], 10.0).item() == 0.0

    def test_constant_difference_closed_form(self):
        base = _image(5).double()
        assert abs(feature_matching([base], [base + 0.1], 10.0).item() - 1.0) < 1e-9

    def test_zero_weight_kills_term(self):
        assert feature_matching([_image(0)], [_image(1)], 0.0).item() == 0.0

    def test_misaligned_stacks_rejected(self):
        with pytest.raises(ValueError):
            feature_matching([_image(0)], [_image(0), _image(1)], 1.0)


class TestAdversarialGenerator:
    @pytest.mark.parametrize(
        "score,fm,expected", [(2.5, 0.0, -2.5), (0.0, 1.0, 1.0), (-1.0, 0.5, 1.5)]
    )
    def test_sign_convention(self, score, fm, expected):
        out = adversarial_loss_generator(torch.tensor(score), torch.tensor(fm))
        assert abs(out.item() - expected) < 1e-9


class TestMatchLoss:
    def test_exact_match_gives_zero(self):
        w = torch.tensor([0.3, -0.7, 1.1])
        assert match_loss([w.clone(), w.clone()], w, 10.0).item() == 0.0

    def test_two_dim_closed_form(self):
        column = torch.tensor([1.0, 1.0], dtype=torch.float64)
        support = [torch.tensor([1.3, 1.1], dtype=torch.float64)]
        assert abs(match_loss(support, column, 10.0).item() - 2.0) < 1e-9

    def test_zero_weight_for_feedforward_variant(self):
        assert match_loss([torch.randn(8)], torch.randn(8), 0.0).item() == 0.0

    def test_empty_support_rejected(self):
        with pytest.raises(ValueError):
            match_loss([], torch.randn(4), 10.0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            match_loss([torch.randn(4)], torch.randn(5), 1.0)


class TestHinge:
    @pytest.mark.parametrize(
        "real,fake,expected",
        [(1.0, -1.0, 0.0), (0.0, 0.0, 2.0), (2.0, -3.0, 0.0)],
    )
    def test_closed_forms(self, real, fake, expected):
        out = hinge_loss_discriminator(torch.tensor(real), torch.tensor(fake))
        assert abs(out.item() - expected) < 1e-9

    def test_nonnegative_and_zero_iff_margins_met(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            sr, sf = rng.normal(0, 2.0, size=2)
            value = hinge_loss_discriminator(torch.tensor(sr), torch.tensor(sf)).item()
            assert value >= 0.0
            assert (value == 0.0) == (sr >= 1.0 and sf <= -1.0)

    def test_batch_reduction_is_mean(self):
        real = torch.tensor([1.0, 0.0])
        fake = torch.tensor([-1.0, 0.0])
        assert abs(hinge_loss_discriminator(real, fake).item() - 1.0) < 1e-9


class TestTotalObjective:
    @pytest.mark.parametrize(
        "terms,expected", [((0.0, 0.0, 0.0), 0.0), ((1.0, -2.5, 2.0), 0.5)]
    )
    def test_plain_sum(self, terms, expected):
        assert abs(total_meta_objective(*terms).item() - expected) < 1e-9

    def test_feedforward_variant_reduces_to_two_terms(self):
        content, adv = torch.tensor(1.25), torch.tensor(-0.5)
        match = match_loss([torch.randn(4)], torch.randn(4), 0.0)
        total = total_meta_objective(content, adv, match)
        assert total.item() == (content + adv).item()


class TestLossWeights:
    def test_defaults_match_training_setup(self):
        w = LossWeights()
        assert w.fm_weight == 10.0
        assert w.mch_weight == 10.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(fm_weight=-1.0)

    def test_round_trip_through_dict(self):
        w = LossWeights(content=(ExtractorTap("identity", (0,), 0.5),), fm_weight=3.0)
        assert LossWeights.from_dict(w.to_dict()) == w
