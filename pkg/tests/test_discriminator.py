import pytest
import torch

from dtegan.discriminator import (Discriminator, DownBlock, ResBlock,
                                  num_downblocks, trunk_out_channels)


class TestTrunk:
    def test_paper_preset_reaches_4ch_at_8x8(self):
        ch = 64
        d = Discriminator(256, ch, d_s=256)
        t = d.trunk(torch.randn(1, 3, 256, 256))
        assert t.shape == (1, 4 * ch, 8, 8)
        assert len(d.trunk_blocks) == 5

    def test_desk_64_has_three_downblocks(self):
        d = Discriminator(64, 16, d_s=64)
        assert len(d.trunk_blocks) == 3
        t = d.trunk(torch.randn(2, 3, 64, 64))
        assert t.shape[2:] == (8, 8)

    def test_wrong_resolution_errors(self):
        d = Discriminator(64, 16, d_s=64)
        with pytest.raises(ValueError):
            d.trunk(torch.randn(1, 3, 32, 32))

    def test_determinism(self):
        torch.manual_seed(0)
        d = Discriminator(32, 8, d_s=32).eval()
        x = torch.randn(2, 3, 32, 32)
        assert torch.equal(d.trunk(x), d.trunk(x))

    def test_channel_schedule(self):
        assert trunk_out_channels(1, 256) == [1, 2, 4, 4, 4]
        assert trunk_out_channels(1, 64) == [1, 2, 4]
        assert num_downblocks(32) == 2


class TestDiscriminate:
    def test_zero_weight_adversarial_branch_returns_bias(self):
        d = Discriminator(32, 8, d_s=32, use_spectral_norm=False)
        with torch.no_grad():
            for p in d.adv_down.parameters():
                p.zero_()
            for p in d.adv_res.parameters():
                p.zero_()
            d.adv_fc.weight.zero_()
            d.adv_fc.bias.fill_(0.37)
        out_a = d(torch.randn(3, 3, 32, 32))
        out_b = d(torch.rand(3, 3, 32, 32))
        assert torch.allclose(out_a.logit, torch.full((3,), 0.37))
        assert torch.allclose(out_b.logit, torch.full((3,), 0.37))

    def test_f_v_dimension_matches_sentence_dim(self):
        d = Discriminator(256, 64, d_s=256)
        out = d(torch.randn(1, 3, 256, 256))
        assert out.f_v.shape == (1, 256)

    def test_conditional_mode_requires_s_d(self):
        d = Discriminator(32, 8, d_s=32, conditional=True)
        with pytest.raises(ValueError):
            d(torch.randn(2, 3, 32, 32))

    def test_unconditional_rejects_s_d(self):
        d = Discriminator(32, 8, d_s=32)
        with pytest.raises(ValueError):
            d(torch.randn(2, 3, 32, 32), torch.randn(2, 32))

    def test_conditional_logit_depends_on_s_d(self):
        torch.manual_seed(1)
        d = Discriminator(32, 8, d_s=32, conditional=True)
        for _ in range(5):  # settle spectral-norm power iteration
            d(torch.randn(2, 3, 32, 32), torch.randn(2, 32))
        d.eval()
        x = torch.randn(2, 3, 32, 32)
        a = d(x, torch.randn(2, 32))
        b = d(x, torch.randn(2, 32))
        assert not torch.allclose(a.logit, b.logit)
        # contrastive features ignore the conditional head entirely
        assert torch.equal(a.f_v, b.f_v)

    def test_batch_order_equivariance(self):
        torch.manual_seed(2)
        d = Discriminator(32, 8, d_s=32).eval()
        x = torch.randn(5, 3, 32, 32)
        perm = torch.tensor([3, 0, 4, 1, 2])
        out = d(x)
        out_p = d(x[perm])
        assert torch.allclose(out.logit[perm], out_p.logit, atol=1e-5)
        assert torch.allclose(out.f_v[perm], out_p.f_v, atol=1e-5)


class TestBranchIsolation:
    def test_logit_loss_never_touches_contrastive_linear(self):
        torch.manual_seed(0)
        d = Discriminator(32, 8, d_s=32)
        out = d(torch.randn(2, 3, 32, 32))
        out.logit.sum().backward()
        from dtegan.generator import _weight_of
        assert _weight_of(d.cont_fc).grad is None
        assert _weight_of(d.adv_fc).grad is not None

    def test_feature_loss_never_touches_adversarial_linear(self):
        torch.manual_seed(0)
        d = Discriminator(32, 8, d_s=32)
        d.features(torch.randn(2, 3, 32, 32)).sum().backward()
        from dtegan.generator import _weight_of
        assert _weight_of(d.adv_fc).grad is None
        assert _weight_of(d.cont_fc).grad is not None


class TestBlocks:
    def test_downblock_halves_spatial(self):
        b = DownBlock(4, 8)
        assert b(torch.randn(2, 4, 16, 16)).shape == (2, 8, 8, 8)

    def test_resblock_identity_when_zeroed(self):
        b = ResBlock(4, use_spectral_norm=False)
        with torch.no_grad():
            for p in b.parameters():
                p.zero_()
        x = torch.randn(2, 4, 4, 4)
        assert torch.equal(b(x), x)
