"""Latent-conditioned U-Net predicting the diffusion target for the residual."""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .diffusion import Parameterization


def timestep_embedding(t_norm: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = scale * t_norm.float()[:, None] * freqs[None, :].to(t_norm.device)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """``f(r_t, y_hat, t_norm) -> prediction`` with ``prediction.shape == r_t.shape``.

    The latent is resized to every U-Net resolution, projected with a 1x1 conv
    and concatenated to the features entering that level. ``extra_channels``
    images (e.g. video reconstructions) are concatenated to the input.
    ``latent_channels = 0`` builds a model that never reads a latent.
    """

    def __init__(self, latent_channels: int, width: int = 32, mults=(1, 2, 2), blocks: int = 1,
                 extra_channels: int = 0, channels: int = 3, latent_factor: int = 16,
                 parameterization: Parameterization | str = Parameterization.EPSILON):
        super().__init__()
        self.parameterization = Parameterization(parameterization)
        self.latent_channels = latent_channels
        self.extra_channels = extra_channels
        self.latent_factor = latent_factor
        self.channels = channels
        temb = 4 * width
        self.time_mlp = nn.Sequential(nn.Linear(width, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.width = width
        cond = width // 2 if latent_channels else 0

        self.inp = nn.Conv2d(channels + extra_channels, width, 3, padding=1)
        self.cond_proj = nn.ModuleList()
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = []
        c = width
        for i, m in enumerate(mults):
            if latent_channels:
                self.cond_proj.append(nn.Conv2d(latent_channels, cond, 1))
            level = nn.ModuleList()
            for j in range(blocks):
                level.append(ResBlock(c + (cond if j == 0 else 0), width * m, temb))
                c = width * m
            self.down.append(level)
            skips.append(c)
            last = i == len(mults) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(c, c, 3, stride=2, padding=1))

        self.mid = ResBlock(c, c, temb)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, m in reversed(list(enumerate(mults))):
            level = nn.ModuleList()
            for j in range(blocks):
                level.append(ResBlock(c + (skips[i] if j == 0 else 0), width * m, temb))
                c = width * m
            self.up.append(level)
            self.upsample.append(nn.Identity() if i == 0 else nn.Upsample(scale_factor=2, mode="nearest"))
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, channels, 3, padding=1)

    def forward(self, r_t: torch.Tensor, y_hat: torch.Tensor | None, t_norm,
                extra: torch.Tensor | None = None) -> torch.Tensor:
        b = r_t.shape[0]
        if not torch.is_tensor(t_norm):
            t_norm = torch.full((b,), float(t_norm), device=r_t.device)
        elif t_norm.ndim == 0:
            t_norm = t_norm.expand(b)
        emb = self.time_mlp(timestep_embedding(t_norm, self.width))

        if self.extra_channels:
            if extra is None or extra.shape[1] != self.extra_channels:
                raise ValueError(f"model expects {self.extra_channels} extra conditioning channels")
            h = self.inp(torch.cat([r_t, extra], dim=1))
        else:
            h = self.inp(r_t)
        if self.latent_channels and y_hat is None:
            raise ValueError("this denoiser is latent-conditioned but got no latent")

        hs = []
        for i, level in enumerate(self.down):
            if self.latent_channels:
                c = F.interpolate(y_hat, size=h.shape[-2:], mode="nearest")
                h = torch.cat([h, self.cond_proj[i](c)], dim=1)
            for block in level:
                h = block(h, emb)
            hs.append(h)
            h = self.downsample[i](h)
        h = self.mid(h, emb)
        for level, up in zip(self.up, self.upsample):
            skip = hs.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = torch.cat([h, skip], dim=1)
            for block in level:
                h = block(h, emb)
            h = up(h)
        return self.out(F.silu(self.out_norm(h)))

    def residual_shape(self, y_hat: torch.Tensor) -> tuple:
        b, _, h, w = y_hat.shape
        return (b, self.channels, h * self.latent_factor, w * self.latent_factor)
