"""Architecture shape contracts, stage hand-off, and configuration guards."""

import pytest
import torch

from vqd.discriminator import PatchDiscriminator, discriminator_step
from vqd.errors import ConfigError, ShapeMismatchError, StageTagError
from vqd.msvqgan import (
    MSVQGANConfig,
    MultiScaleVQGAN,
    build_model,
    load_stage1_into_stage2,
    stage1_parameter_names,
)
from vqd.perceptual import build_perceptual


def tiny_cfg(stage="stage2", **kw):
    base = dict(
        base_channels=16,
        embed_dim=32,
        codebook_size=64,
        crop_size=64,
        stage=stage,
        disc_channels=16,
    )
    base.update(kw)
    return MSVQGANConfig(**base)


class TestEncodeDecodeShapes:
    @pytest.mark.parametrize("hw", [64, 128])
    def test_tiny_shapes(self, hw):
        model = build_model(tiny_cfg(), seed=0)
        x = torch.rand(1, 3, hw, hw)
        with torch.no_grad():
            feats = model.encode(x)
        n_z = 32
        assert feats.z_t.shape == (1, n_z, hw // 8, hw // 8)
        assert feats.z_m.shape == (1, n_z, hw // 4, hw // 4)
        assert feats.z_b.shape == (1, n_z, hw // 2, hw // 2)
        assert feats.x_m.shape == (1, 32, hw // 4, hw // 4)
        assert feats.x_b.shape == (1, 16, hw // 2, hw // 2)
        with torch.no_grad():
            out = model.decode(feats.z_t, feats.z_m, feats.z_b)
        assert out.shape == (1, 3, hw, hw)

    def test_indivisible_size_raises_before_compute(self):
        model = build_model(tiny_cfg(), seed=0)
        with pytest.raises(ShapeMismatchError, match="100"):
            model.encode(torch.rand(1, 3, 100, 100))

    def test_mismatched_middle_latent(self):
        model = build_model(tiny_cfg(), seed=0)
        zt = torch.rand(1, 32, 8, 8)
        zm_bad = torch.rand(1, 32, 15, 16)
        zb = torch.rand(1, 32, 32, 32)
        with pytest.raises(ShapeMismatchError):
            model.decode(zt, zm_bad, zb)

    def test_stage1_has_no_branch_parameters(self):
        m1 = build_model(tiny_cfg(stage="stage1"), seed=0)
        names = set(m1.state_dict().keys())
        assert not any(k.startswith(("mid_", "bot_")) for k in names)
        m2 = build_model(tiny_cfg(stage="stage2"), seed=0)
        extra = set(m2.state_dict().keys()) - names
        assert extra and all(k.startswith(("mid_", "bot_")) for k in extra)
        assert stage1_parameter_names(tiny_cfg(stage="stage2")) == names


class TestStageHandoff:
    def test_zero_init_laterals_preserve_stage1_function(self):
        torch.manual_seed(0)
        m1 = build_model(tiny_cfg(stage="stage1"), seed=3)
        m2 = build_model(tiny_cfg(stage="stage2"), seed=4)
        load_stage1_into_stage2(m2, m1)
        for _ in range(3):
            x = torch.rand(2, 3, 64, 64)
            with torch.no_grad():
                f1 = m1.encode(x)
                y1 = m1.decode(f1.z_t)
                y2, _, _ = m2.reconstruct(x)
                y1q, _, _ = m1.reconstruct(x)
            assert (y1q - y2).abs().max().item() <= 1e-6

    def test_stage_tag_checks(self):
        m1 = build_model(tiny_cfg(stage="stage1"), seed=0)
        m2 = build_model(tiny_cfg(stage="stage2"), seed=0)
        with pytest.raises(StageTagError):
            load_stage1_into_stage2(m2, m2)
        with pytest.raises(StageTagError):
            load_stage1_into_stage2(m1, m1)


class TestReconstruct:
    def test_losses_finite_and_nonnegative(self):
        model = build_model(tiny_cfg(), seed=1)
        per = build_perceptual(seed=0)
        disc = PatchDiscriminator(channels=16)
        x = torch.rand(2, 3, 64, 64)
        x_hat, losses, aux = model.reconstruct(x, perceptual=per, discriminator=disc)
        assert x_hat.shape == x.shape
        for name in ("l_rec", "l_codebook", "l_commit", "l_vq", "l_per"):
            v = losses[name].item()
            assert v >= 0 and torch.isfinite(losses[name])
        assert torch.isfinite(losses["l_adv"])
        assert set(aux["indices"]) == {"top", "middle", "bottom"}

    def test_bottom_k1_equals_nearest(self):
        model = build_model(tiny_cfg(), seed=2)
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a, _, _ = model.reconstruct(x, bottom_k=1)
            b, _, _ = model.reconstruct(x)
        assert torch.equal(a, b)

    def test_topk_rejected_outside_bottom(self):
        model = build_model(tiny_cfg(), seed=2)
        z = torch.rand(1, 32, 8, 8)
        with pytest.raises(ConfigError, match="bottom"):
            model.quantize_branch(z, "top", k=3)
        with pytest.raises(ConfigError, match="bottom"):
            model.quantize_branch(z, "middle", k=2)

    def test_adversarial_requires_stage2(self):
        model = build_model(tiny_cfg(stage="stage1"), seed=0)
        disc = PatchDiscriminator(channels=16)
        with pytest.raises(ConfigError):
            model.reconstruct(torch.rand(1, 3, 64, 64), discriminator=disc)


class TestDiscriminator:
    def test_patch_grid_shape_256(self):
        disc = PatchDiscriminator(channels=64, n_layers=3)
        logits = disc(torch.rand(1, 3, 256, 256))
        assert logits.shape == (1, 1, 30, 30)

    def test_identical_inputs_symmetric_losses(self):
        disc = PatchDiscriminator(channels=16)
        x = torch.rand(2, 3, 64, 64)
        losses = discriminator_step(disc, x, x)
        assert losses["d_real"].item() == pytest.approx(losses["d_fake"].item())

    def test_shape_mismatch(self):
        disc = PatchDiscriminator(channels=16)
        with pytest.raises(ShapeMismatchError):
            discriminator_step(disc, torch.rand(1, 3, 64, 64), torch.rand(1, 3, 32, 32))


class TestConfig:
    def test_paper_scale_defaults(self):
        cfg = MSVQGANConfig()
        assert cfg.base_channels == 128
        assert cfg.embed_dim == 256
        assert cfg.codebook_size == 1024
        assert cfg.crop_size == 256
        assert cfg.compression_factors == {"top": 8, "middle": 4, "bottom": 2}
        assert cfg.stage1_lr == pytest.approx(4.5e-6)
        assert (cfg.stage1_batch, cfg.stage2_batch) == (32, 24)
        assert cfg.top_lr_divisor == 4.0

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            MSVQGANConfig(crop_size=60).validate()
        with pytest.raises(ConfigError):
            MSVQGANConfig(compression_factors={"top": 4, "middle": 4, "bottom": 2}).validate()
        with pytest.raises(ConfigError):
            MSVQGANConfig(stage="stage3").validate()
        with pytest.raises(ConfigError):
            MSVQGANConfig.from_dict({"no_such_key": 1})
