"""Torch network architectures: the conditional U-Net used by the diffusion
stage and the plain residual CNN used for distillation.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class SinusoidalTimeEmbedding(nn.Module):
    """Classic sin/cos positional features of the integer timestep."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("embedding dim must be even")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=torch.float32, device=t.device)
            / max(half - 1, 1)
        ).to(t.dtype if t.is_floating_point() else torch.float32)
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Small U-Net predicting the injected noise from (x_t, condition, t).

    The condition enters by channel concatenation at the input. Spatial size
    must be divisible by 2**(levels-1).
    """

    def __init__(self, base_channels: int = 32, levels: int = 3, time_embed_dim: int = 128):
        super().__init__()
        if levels < 1:
            raise ValueError("levels must be >= 1")
        self.levels = levels
        mults = [1] + [2] * (levels - 1)
        chans = [base_channels * m for m in mults]

        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(time_embed_dim),
            nn.Linear(time_embed_dim, time_embed_dim),
            nn.SiLU(),
            nn.Linear(time_embed_dim, time_embed_dim),
        )
        self.stem = nn.Conv2d(2, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList(
            [ResBlock(chans[max(i - 1, 0)], chans[i], time_embed_dim) for i in range(levels)]
        )
        self.downsamples = nn.ModuleList(
            [nn.Conv2d(chans[i], chans[i], 3, stride=2, padding=1) for i in range(levels - 1)]
        )
        self.mid = ResBlock(chans[-1], chans[-1], time_embed_dim)
        self.up_blocks = nn.ModuleList(
            [
                ResBlock(chans[i + 1] + chans[i], chans[i], time_embed_dim)
                for i in reversed(range(levels - 1))
            ]
        )
        self.upsamples = nn.ModuleList(
            [nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1) for i in reversed(range(levels - 1))]
        )
        self.head_norm = _norm(chans[0])
        self.head = nn.Conv2d(chans[0], 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x_t: torch.Tensor, condition: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        size = x_t.shape[-1]
        if size % (1 << (self.levels - 1)) or x_t.shape[-2] % (1 << (self.levels - 1)):
            raise ValueError("spatial size must be divisible by 2**(levels-1)")
        emb = self.time_embed(t)
        h = self.stem(torch.cat([x_t, condition], dim=1))

        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            if i < self.levels - 1:
                skips.append(h)
                h = self.downsamples[i](h)
        h = self.mid(h, emb)
        for upsample, block in zip(self.upsamples, self.up_blocks):
            h = upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.head(F.silu(self.head_norm(h)))


class ResidualRestorationCNN(nn.Module):
    """Plain convolutional restoration net with a global input skip."""

    def __init__(self, channels: int = 48, depth: int = 8):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        layers: list[nn.Module] = [nn.Conv2d(1, channels, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(channels, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.head(self.body(x))
