"""Three-branch multi-scale vector-quantized autoencoder.

The encoder shares a shallow stem; the top branch compresses by 8x and ends
in a non-local block, while the middle (4x) and bottom (2x) branches consume
intermediate taps of the top trunk. During decoding the branch outputs are
added back laterally at the points where spatial and channel shapes match.
Stage-1 models contain only the top path; stage 2 adds the other two
branches with zero-initialized lateral producers so that, at hand-off, the
full model reproduces the stage-1 function exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import torch
import torch.nn as nn

from .blocks import Downsample, NonLocalBlock, ResidualBlock, Upsample, group_norm, zero_init
from .errors import ConfigError, ShapeMismatchError, StageTagError
from .vq import init_codebook_entries, kth_indices, nearest_indices, straight_through, vq_loss_terms

STAGES = ("stage1", "stage2")


@dataclass
class MSVQGANConfig:
    """Architecture and training hyperparameters for the degradation model."""

    base_channels: int = 128
    embed_dim: int = 256
    codebook_size: int = 1024
    compression_factors: dict = field(
        default_factory=lambda: {"top": 8, "middle": 4, "bottom": 2}
    )
    crop_size: int = 256
    stage: str = "stage1"
    beta: float = 0.25
    beta_placement: str = "as-printed"
    shared_codebook: bool = True
    perceptual_weight: float = 1.0
    adversarial_weight: float = 0.8
    disc_channels: int = 64
    disc_layers: int = 3
    stage1_lr: float = 4.5e-6
    stage1_batch: int = 32
    stage1_steps: int = 200_000
    stage2_lr: float = 4.5e-6
    stage2_batch: int = 24
    stage2_steps: int = 200_000
    top_lr_divisor: float = 4.0

    def validate(self) -> "MSVQGANConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.crop_size % 8 != 0:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.compression_factors != {"top": 8, "middle": 4, "bottom": 2}:
            raise ConfigError(
                "compression factors must match the downsample-step counts "
                f"{{top: 8, middle: 4, bottom: 2}}, got {self.compression_factors}"
            )
        for name in ("base_channels", "embed_dim", "codebook_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.beta_placement not in ("as-printed", "commitment"):
            raise ConfigError(f"unknown beta_placement {self.beta_placement!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MSVQGANConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown MSVQGANConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class BranchFeatures:
    """Encoder outputs: top-trunk taps and the per-branch latent grids."""

    x_b: torch.Tensor  # B x C  x H/2 x W/2
    x_m: torch.Tensor  # B x 2C x H/4 x W/4
    z_t: torch.Tensor  # B x n_z x H/8 x W/8
    z_m: Optional[torch.Tensor] = None  # B x n_z x H/4 x W/4 (stage 2)
    z_b: Optional[torch.Tensor] = None  # B x n_z x H/2 x W/2 (stage 2)


def _middle_encoder(C: int, n_z: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(2 * C, 2 * C, 3, padding=1),
        ResidualBlock(2 * C),
        ResidualBlock(2 * C),
        nn.Conv2d(2 * C, 4 * C, 3, padding=1),
        ResidualBlock(4 * C),
        ResidualBlock(4 * C),
        group_norm(4 * C),
        nn.SiLU(),
        nn.Conv2d(4 * C, n_z, 3, padding=1),
    )


def _middle_decoder(C: int, n_z: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(n_z, 4 * C, 3, padding=1),
        ResidualBlock(4 * C),
        ResidualBlock(4 * C),
        nn.Conv2d(4 * C, 2 * C, 3, padding=1),
        ResidualBlock(2 * C),
        ResidualBlock(2 * C),
        zero_init(nn.Conv2d(2 * C, 2 * C, 3, padding=1)),
    )


def _bottom_encoder(C: int, n_z: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(C, 2 * C, 3, padding=1),
        ResidualBlock(2 * C),
        ResidualBlock(2 * C),
        nn.Conv2d(2 * C, 2 * C, 3, padding=1),
        ResidualBlock(2 * C),
        ResidualBlock(2 * C),
        nn.Conv2d(2 * C, 4 * C, 3, padding=1),
        ResidualBlock(4 * C),
        ResidualBlock(4 * C),
        group_norm(4 * C),
        nn.SiLU(),
        nn.Conv2d(4 * C, n_z, 3, padding=1),
    )


def _bottom_decoder(C: int, n_z: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(n_z, 4 * C, 3, padding=1),
        ResidualBlock(4 * C),
        ResidualBlock(4 * C),
        nn.Conv2d(4 * C, 2 * C, 3, padding=1),
        ResidualBlock(2 * C),
        ResidualBlock(2 * C),
        nn.Conv2d(2 * C, 2 * C, 3, padding=1),
        ResidualBlock(2 * C),
        ResidualBlock(2 * C),
        zero_init(nn.Conv2d(2 * C, C, 3, padding=1)),
    )


class MultiScaleVQGAN(nn.Module):
    """Encoder/decoder pair with one quantized latent grid per branch."""

    def __init__(self, cfg: MSVQGANConfig, codebook_seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, n_z, L = cfg.base_channels, cfg.embed_dim, cfg.codebook_size

        # shared shallow feature extraction
        self.stem = nn.Conv2d(3, C, 3, padding=1)

        # top branch encoder trunk; x_b and x_m are taps feeding the others
        self.enc_down1 = nn.Sequential(Downsample(C), ResidualBlock(C), ResidualBlock(C))
        self.enc_down2 = nn.Sequential(Downsample(C), ResidualBlock(C, 2 * C), ResidualBlock(2 * C))
        self.enc_down3 = nn.Sequential(Downsample(2 * C), ResidualBlock(2 * C), ResidualBlock(2 * C))
        self.enc_mid = nn.Sequential(
            nn.Conv2d(2 * C, 4 * C, 3, padding=1), ResidualBlock(4 * C), ResidualBlock(4 * C)
        )
        self.enc_attn = NonLocalBlock(4 * C)
        self.enc_out = nn.Sequential(group_norm(4 * C), nn.SiLU(), nn.Conv2d(4 * C, n_z, 3, padding=1))

        # top branch decoder
        self.dec_in = nn.Conv2d(n_z, 4 * C, 3, padding=1)
        self.dec_attn = NonLocalBlock(4 * C)
        self.dec_mid = nn.Sequential(
            ResidualBlock(4 * C), ResidualBlock(4 * C), nn.Conv2d(4 * C, 2 * C, 3, padding=1)
        )
        self.dec_up1 = nn.Sequential(ResidualBlock(2 * C), ResidualBlock(2 * C), Upsample(2 * C))
        self.dec_up2 = nn.Sequential(ResidualBlock(2 * C), ResidualBlock(2 * C), Upsample(2 * C, C))
        self.dec_up3 = nn.Sequential(ResidualBlock(C), ResidualBlock(C), Upsample(C))
        self.dec_out = nn.Sequential(ResidualBlock(C), ResidualBlock(C, 3))

        if cfg.stage == "stage2":
            self.mid_encoder = _middle_encoder(C, n_z)
            self.mid_decoder = _middle_decoder(C, n_z)
            self.bot_encoder = _bottom_encoder(C, n_z)
            self.bot_decoder = _bottom_decoder(C, n_z)

        if cfg.shared_codebook:
            self.codebook_entries = nn.Parameter(init_codebook_entries(L, n_z, codebook_seed))
        else:
            branches = ("top",) if cfg.stage == "stage1" else ("top", "middle", "bottom")
            self.codebooks = nn.ParameterDict(
                {
                    b: nn.Parameter(init_codebook_entries(L, n_z, codebook_seed + i))
                    for i, b in enumerate(branches)
                }
            )

    # ---------------------------------------------------------------- helpers

    @property
    def stage(self) -> str:
        return self.cfg.stage

    def entries_for(self, branch: str) -> torch.Tensor:
        if self.cfg.shared_codebook:
            return self.codebook_entries
        if branch not in self.codebooks:
            raise ConfigError(f"no codebook for branch {branch!r} in {self.stage}")
        return self.codebooks[branch]

    def active_branches(self) -> tuple:
        return ("top",) if self.stage == "stage1" else ("top", "middle", "bottom")

    # ------------------------------------------------------------------ paths

    def encode(self, x01: torch.Tensor) -> BranchFeatures:
        """Batched [0,1] images (B x 3 x H x W) to branch latents and taps."""
        if x01.dim() != 4 or x01.shape[1] != 3:
            raise ShapeMismatchError(f"expected B x 3 x H x W input, got {tuple(x01.shape)}")
        h, w = x01.shape[2], x01.shape[3]
        if h % 8 or w % 8:
            raise ShapeMismatchError(f"spatial size {h}x{w} must be divisible by 8")
        x = x01 * 2 - 1
        f0 = self.stem(x)
        x_b = self.enc_down1(f0)
        x_m = self.enc_down2(x_b)
        top = self.enc_out(self.enc_attn(self.enc_mid(self.enc_down3(x_m))))
        feats = BranchFeatures(x_b=x_b, x_m=x_m, z_t=top)
        if self.stage == "stage2":
            feats.z_m = self.mid_encoder(x_m)
            feats.z_b = self.bot_encoder(x_b)
        return feats

    def decode(
        self,
        zq_t: torch.Tensor,
        zq_m: Optional[torch.Tensor] = None,
        zq_b: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Quantized branch latents to a [0,1]-scaled image (unclamped)."""
        ht, wt = zq_t.shape[2], zq_t.shape[3]
        if self.stage == "stage1":
            if zq_m is not None or zq_b is not None:
                raise StageTagError("stage1 decoder accepts the top latent only")
        else:
            if zq_m is None or zq_b is None:
                raise ShapeMismatchError("stage2 decode requires all three branch latents")
            if tuple(zq_m.shape[2:]) != (2 * ht, 2 * wt):
                raise ShapeMismatchError(
                    f"middle latent {tuple(zq_m.shape[2:])} inconsistent with top "
                    f"latent {(ht, wt)} (expected {(2 * ht, 2 * wt)})"
                )
            if tuple(zq_b.shape[2:]) != (4 * ht, 4 * wt):
                raise ShapeMismatchError(
                    f"bottom latent {tuple(zq_b.shape[2:])} inconsistent with top "
                    f"latent {(ht, wt)} (expected {(4 * ht, 4 * wt)})"
                )
        h = self.dec_attn(self.dec_in(zq_t))
        h = self.dec_mid(h)
        h = self.dec_up1(h)
        if zq_m is not None:
            h = h + self.mid_decoder(zq_m)
        h = self.dec_up2(h)
        if zq_b is not None:
            h = h + self.bot_decoder(zq_b)
        h = self.dec_up3(h)
        raw = self.dec_out(h)
        return (raw + 1.0) / 2.0

    def quantize_branch(self, z: torch.Tensor, branch: str, k: int = 1):
        """Quantize a batched latent grid against the branch codebook.

        Returns (straight-through latents, embedded entries, index grid).
        k > 1 selects the k-th closest entry and is reserved for the bottom
        branch at degradation-synthesis time.
        """
        if branch not in ("top", "middle", "bottom"):
            raise ConfigError(f"unknown branch {branch!r}")
        if k != 1 and branch != "bottom":
            raise ConfigError(
                "stochastic top-k quantization is only for the bottom branch; "
                f"requested k={k} on {branch!r}"
            )
        entries = self.entries_for(branch)
        b, c, hh, ww = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        with torch.no_grad():
            if k == 1:
                idx, _ = nearest_indices(flat, entries.detach())
            else:
                idx, _ = kth_indices(flat, entries.detach(), k)
        z_q = entries[idx].reshape(b, hh, ww, c).permute(0, 3, 1, 2)
        z_st = straight_through(z, z_q)
        return z_st, z_q, idx.reshape(b, hh, ww)

    def reconstruct(
        self,
        x01: torch.Tensor,
        bottom_k: int = 1,
        perceptual: Optional[nn.Module] = None,
        discriminator: Optional[nn.Module] = None,
        indices_override: Optional[dict] = None,
    ):
        """Full quantized autoencode; returns (x_hat, losses, aux).

        ``losses`` carries the quantizer objective (reconstruction plus the
        codebook/commitment terms over active branches), the perceptual term
        when an extractor is supplied, and the generator adversarial term
        when a discriminator is supplied on a stage-2 model.
        ``indices_override`` substitutes frozen index grids per branch, used
        by gradient-verification harnesses.
        """
        cfg = self.cfg
        feats = self.encode(x01)
        latents = {"top": feats.z_t}
        if self.stage == "stage2":
            latents["middle"] = feats.z_m
            latents["bottom"] = feats.z_b

        quantized, l_codebook, l_commit = {}, 0.0, 0.0
        indices = {}
        for branch, z in latents.items():
            k = bottom_k if branch == "bottom" else 1
            if indices_override is not None and branch in indices_override:
                entries = self.entries_for(branch)
                idx = indices_override[branch]
                b, c, hh, ww = z.shape
                z_q = entries[idx.reshape(-1)].reshape(b, hh, ww, c).permute(0, 3, 1, 2)
                z_st = straight_through(z, z_q)
            else:
                z_st, z_q, idx = self.quantize_branch(z, branch, k=k)
            quantized[branch] = z_st
            indices[branch] = idx
            cb_t, cm_t = vq_loss_terms(
                z.permute(0, 2, 3, 1),
                z_q.permute(0, 2, 3, 1),
                beta=cfg.beta,
                beta_placement=cfg.beta_placement,
            )
            l_codebook = l_codebook + cb_t
            l_commit = l_commit + cm_t

        x_hat = self.decode(
            quantized["top"], quantized.get("middle"), quantized.get("bottom")
        )
        l_rec = (x01 - x_hat).abs().mean()
        l_vq = l_rec + l_codebook + l_commit

        losses = {
            "l_rec": l_rec,
            "l_codebook": l_codebook,
            "l_commit": l_commit,
            "l_vq": l_vq,
        }
        if perceptual is not None:
            losses["l_per"] = perceptual(x01, x_hat)
        if discriminator is not None:
            if self.stage != "stage2":
                raise ConfigError("adversarial loss applies to stage2 models only")
            losses["l_adv"] = -discriminator(x_hat).mean()
        aux = {"latents": latents, "indices": indices, "quantized": quantized}
        return x_hat, losses, aux

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        x_hat, _, _ = self.reconstruct(x01)
        return x_hat


def build_model(cfg: MSVQGANConfig, seed: int = 0) -> MultiScaleVQGAN:
    """Deterministically initialized model; same (cfg, seed) -> same weights."""
    torch.manual_seed(seed)
    return MultiScaleVQGAN(cfg, codebook_seed=seed)


def load_stage1_into_stage2(stage2_model: MultiScaleVQGAN, stage1_model: MultiScaleVQGAN):
    """Copy every stage-1 parameter into the matching stage-2 module.

    Lateral producers in the stage-2 decoder are zero-initialized at
    construction, so immediately after this copy the stage-2 model computes
    the same function as the stage-1 model.
    """
    if stage1_model.stage != "stage1":
        raise StageTagError(f"expected a stage1 source model, got {stage1_model.stage}")
    if stage2_model.stage != "stage2":
        raise StageTagError(f"expected a stage2 target model, got {stage2_model.stage}")
    src = stage1_model.state_dict()
    dst = stage2_model.state_dict()
    for key, value in src.items():
        if key in dst:
            if dst[key].shape != value.shape:
                raise ShapeMismatchError(f"parameter {key} shape mismatch across stages")
            dst[key] = value.clone()
    stage2_model.load_state_dict(dst)
    return stage2_model


def stage1_parameter_names(cfg: MSVQGANConfig) -> set:
    """Names of parameters shared with (inherited from) a stage-1 model."""
    tmp_cfg = MSVQGANConfig(**{**cfg.to_dict(), "stage": "stage1"})
    probe = MultiScaleVQGAN(tmp_cfg)
    return set(probe.state_dict().keys())
