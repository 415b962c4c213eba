"""Pluggable perceptual feature distance.

The default extractor is a small, fixed, seeded conv pyramid: it is not a
pretrained network, just a frozen random projection whose multi-scale
feature distances still penalize structural differences. Swap in a real
pretrained backbone by passing any module with the same call signature.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class RandomPyramidPerceptual(nn.Module):
    """Frozen random conv pyramid; distance = mean MSE over its levels."""

    def __init__(self, channels: int = 16, levels: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for _ in range(levels):
            conv = nn.Conv2d(in_ch, channels, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            convs.append(conv)
            in_ch = channels
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor):
        feats = []
        h = x
        for conv in self.convs:
            h = F.silu(conv(h))
            feats.append(h)
            h = F.avg_pool2d(h, 2)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        loss = 0.0
        for xa, xb in zip(fa, fb):
            loss = loss + F.mse_loss(xa, xb)
        return loss / len(fa)


def build_perceptual(seed: int = 0, channels: int = 16, levels: int = 3):
    return RandomPyramidPerceptual(channels=channels, levels=levels, seed=seed)
