"""Unidirectional recurrent x4 video upscaler.

Each step concatenates the previous, current, and next LR frames with the
carried hidden state; there is no alignment module and no feedback of the
super-resolved frame. The head predicts a residual on top of a bicubic x4
upsample through two depth-to-space x2 stages. Both output heads start at
zero, so a fresh network is exactly the bicubic upsampler and the hidden
state stays null until training moves the weights.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import zero_init
from .errors import ConfigError, ShapeMismatchError, VQDError
from .imgio import check_frame, from_tensor, to_tensor


@dataclass
class VSRConfig:
    channels: int = 64
    blocks: int = 15
    state_channels: int = 64
    scale: int = 4
    train_crop: int = 256
    clip_length: int = 5
    stage1_steps: int = 300_000
    stage1_batch: int = 16
    stage1_lr: float = 1e-4
    stage2_steps: int = 300_000
    stage2_batch: int = 16
    stage2_lr: float = 5e-5
    l1_weight: float = 1.0
    perceptual_weight: float = 1.0
    gan_weight: float = 0.1
    gan_kind: str = "vanilla"
    use_enhanced_gt: bool = True
    disc_channels: int = 64
    disc_layers: int = 3

    def validate(self) -> "VSRConfig":
        if self.scale != 4:
            raise ConfigError(f"the upscaler is fixed at scale 4, got {self.scale}")
        for name in ("channels", "blocks", "state_channels", "clip_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.train_crop % (8 * self.scale) != 0:
            raise ConfigError(
                f"train_crop must be divisible by {8 * self.scale}, got {self.train_crop}"
            )
        if self.gan_kind not in ("vanilla", "hinge"):
            raise ConfigError(f"unknown gan_kind {self.gan_kind!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VSRConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown VSRConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


class SRResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


class RecurrentUpscaler(nn.Module):
    def __init__(self, cfg: VSRConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, S = cfg.channels, cfg.state_channels
        self.conv_in = nn.Conv2d(9 + S, C, 3, padding=1)
        self.body = nn.Sequential(*[SRResidualBlock(C) for _ in range(cfg.blocks)])
        self.state_head = zero_init(nn.Conv2d(C, S, 3, padding=1))
        self.up1 = nn.Conv2d(C, 4 * C, 3, padding=1)
        self.up2 = nn.Conv2d(C, 4 * C, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.conv_out = zero_init(nn.Conv2d(C, 3, 3, padding=1))

    def initial_state(self, lr_frame: torch.Tensor) -> torch.Tensor:
        b, _, h, w = lr_frame.shape
        return torch.zeros(b, self.cfg.state_channels, h, w, dtype=lr_frame.dtype)

    def step(self, prev, cur, nxt, state, clamp: bool = True):
        """One recurrent step: (LR triplet, state) -> (SR frame, new state)."""
        if not (prev.shape == cur.shape == nxt.shape):
            raise ShapeMismatchError(
                f"frame triplet shapes differ: {tuple(prev.shape)}, "
                f"{tuple(cur.shape)}, {tuple(nxt.shape)}"
            )
        if state.shape[0] != cur.shape[0] or state.shape[2:] != cur.shape[2:]:
            raise ShapeMismatchError(
                f"state {tuple(state.shape)} does not match frames {tuple(cur.shape)}"
            )
        feat = F.leaky_relu(self.conv_in(torch.cat([prev, cur, nxt, state], dim=1)), 0.1)
        feat = self.body(feat)
        new_state = self.state_head(feat)
        up = F.leaky_relu(self.shuffle(self.up1(feat)), 0.1)
        up = F.leaky_relu(self.shuffle(self.up2(up)), 0.1)
        residual = self.conv_out(up)
        base = F.interpolate(cur, scale_factor=self.cfg.scale, mode="bicubic", align_corners=False)
        sr = base.clamp(0.0, 1.0) + residual
        if clamp:
            sr = sr.clamp(0.0, 1.0)
        return sr, new_state

    def forward_clip(self, lr_clip: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """(T, 3, h, w) -> (T, 3, 4h, 4w), frames processed in order with the
        carried state; clip boundaries replicate the first/last frame."""
        if lr_clip.dim() != 4 or lr_clip.shape[0] < 1:
            raise VQDError(f"expected a non-empty T x 3 x h x w clip, got {tuple(lr_clip.shape)}")
        t = lr_clip.shape[0]
        state = self.initial_state(lr_clip[:1])
        outputs = []
        for i in range(t):
            prev = lr_clip[max(i - 1, 0)][None]
            cur = lr_clip[i][None]
            nxt = lr_clip[min(i + 1, t - 1)][None]
            sr, state = self.step(prev, cur, nxt, state, clamp=clamp)
            outputs.append(sr[0])
        return torch.stack(outputs, dim=0)


def sr_clip(clip: np.ndarray, model: RecurrentUpscaler) -> np.ndarray:
    """Upscale a (T, H, W, 3) [0,1] clip; returns (T, 4H, 4W, 3)."""
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim == 3:
        clip = clip[None]
    if clip.ndim != 4 or clip.shape[0] < 1 or clip.shape[3] != 3:
        raise VQDError(f"expected a non-empty T x H x W x 3 clip, got {clip.shape}")
    frames = torch.stack([to_tensor(check_frame(f))[0] for f in clip], dim=0)
    with torch.no_grad():
        out = model.forward_clip(frames)
    return np.stack([from_tensor(out[i][None]) for i in range(out.shape[0])], axis=0)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def paper_scale_config(**overrides) -> VSRConfig:
    """Preset targeting about 1.47M parameters."""
    cfg = VSRConfig()
    return VSRConfig(**{**cfg.to_dict(), **overrides}).validate()


def tiny_config(**overrides) -> VSRConfig:
    base = dict(
        channels=16,
        blocks=2,
        state_channels=8,
        train_crop=64,
        clip_length=4,
        stage1_steps=3000,
        stage1_batch=4,
        stage1_lr=1e-3,
        stage2_steps=300,
        stage2_batch=2,
        stage2_lr=5e-4,
        disc_channels=16,
    )
    base.update(overrides)
    return VSRConfig(**base).validate()
