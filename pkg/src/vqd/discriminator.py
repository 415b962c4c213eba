"""Patch discriminator and the adversarial loss pair.

A 3-downsample patch discriminator maps a 256x256 image to a 30x30 logit
grid (the 70x70 receptive-field convention). The final conv starts at zero
so a fresh discriminator scores everything 0: both hinge branches are then
active and symmetric at initialization.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import group_norm, zero_init
from .errors import ShapeMismatchError


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int = 3, channels: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [
            nn.Conv2d(in_channels, channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        ]
        ch = channels
        for i in range(1, n_layers):
            ch_next = min(channels * 2 ** i, 8 * channels)
            layers += [
                nn.Conv2d(ch, ch_next, 4, stride=2, padding=1),
                group_norm(ch_next),
                nn.LeakyReLU(0.2),
            ]
            ch = ch_next
        ch_next = min(channels * 2 ** n_layers, 8 * channels)
        layers += [
            nn.Conv2d(ch, ch_next, 4, stride=1, padding=1),
            group_norm(ch_next),
            nn.LeakyReLU(0.2),
            zero_init(nn.Conv2d(ch_next, 1, 4, stride=1, padding=1)),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        return self.net(x01 * 2 - 1)


def hinge_d_losses(logits_real: torch.Tensor, logits_fake: torch.Tensor):
    """Per-side hinge terms; total discriminator loss is their mean."""
    loss_real = F.relu(1.0 - logits_real).mean()
    loss_fake = F.relu(1.0 + logits_fake).mean()
    return loss_real, loss_fake


def vanilla_d_losses(logits_real: torch.Tensor, logits_fake: torch.Tensor):
    loss_real = F.softplus(-logits_real).mean()
    loss_fake = F.softplus(logits_fake).mean()
    return loss_real, loss_fake


def generator_loss(logits_fake: torch.Tensor, kind: str = "hinge") -> torch.Tensor:
    if kind == "hinge":
        return -logits_fake.mean()
    if kind == "vanilla":
        return F.softplus(-logits_fake).mean()
    raise ValueError(f"unknown adversarial loss kind {kind!r}")


def discriminator_step(
    disc: PatchDiscriminator,
    x_real: torch.Tensor,
    x_fake: torch.Tensor,
    kind: str = "hinge",
):
    """Score a real/fake pair; returns the named scalar losses.

    The fake batch is detached: the generator receives no gradient from the
    discriminator update, and vice versa the generator term is computed on
    live fakes by the caller.
    """
    if x_real.shape != x_fake.shape:
        raise ShapeMismatchError(
            f"real batch {tuple(x_real.shape)} and fake batch "
            f"{tuple(x_fake.shape)} must share one shape"
        )
    logits_real = disc(x_real)
    logits_fake = disc(x_fake.detach())
    fn = hinge_d_losses if kind == "hinge" else vanilla_d_losses
    loss_real, loss_fake = fn(logits_real, logits_fake)
    return {
        "d_real": loss_real,
        "d_fake": loss_fake,
        "d_total": 0.5 * (loss_real + loss_fake),
    }
