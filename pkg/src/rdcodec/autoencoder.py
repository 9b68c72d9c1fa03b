"""Analysis/synthesis transforms, quantization and the residual split."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class CodecConfig:
    """Everything needed to rebuild a model; hashed into every bitstream."""

    ae_channels: int = 64
    latent_channels: int = 32
    hyper_channels: int = 16
    latent_downsample: int = 4  # stride-2 stages -> factor 16
    hyper_downsample: int = 2  # further stages -> factor 64
    res_blocks: int = 1
    unet_width: int = 32
    unet_mults: tuple = (1, 2, 2)
    unet_blocks: int = 1
    parameterization: str = "epsilon"
    schedule: str = "linear"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    scale_only: bool = False
    sigma_min: float = 0.01
    sigma_max: float = 64.0
    likelihood_floor: float = 2.0**-16
    tail_max: int = 64
    lmbda: float = 1e-3
    rho: float = 0.5
    default_steps: int = 100
    default_gamma: float = 0.8

    @property
    def latent_factor(self) -> int:
        return 2**self.latent_downsample

    @property
    def hyper_factor(self) -> int:
        return 2 ** (self.latent_downsample + self.hyper_downsample)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["unet_mults"] = list(self.unet_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "unet_mults" in d:
            d["unet_mults"] = tuple(d["unet_mults"])
        return cls(**d)

    def digest(self) -> bytes:
        """16-byte hash of the architecture-relevant fields.

        Rate/perception targets and sampler defaults are excluded: they do not
        change how a stream is decoded.
        """
        d = self.to_dict()
        for k in ("lmbda", "rho", "default_steps", "default_gamma"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:16]


class LatentPair(NamedTuple):
    y: torch.Tensor
    z: torch.Tensor


class QuantMode(str, enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def round_half_away(v: torch.Tensor) -> torch.Tensor:
    return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)


def pseudo_quantize(v: torch.Tensor, mode: QuantMode | str = QuantMode.INFER,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive U[-1/2, 1/2) noise when training, half-away-from-zero rounding otherwise."""
    mode = QuantMode(mode)
    if mode is QuantMode.TRAIN:
        noise = torch.rand(v.shape, generator=generator, dtype=v.dtype, device=v.device) - 0.5
        return v + noise
    return round_half_away(v)


def residual(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return x - x_hat


def combine(x_hat: torch.Tensor, r: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    if x_hat.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(r.shape)}")
    out = x_hat + r
    return out.clamp(0.0, 1.0) if clamp else out


def pad_to_multiple(x: torch.Tensor, factor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Pad bottom/right so both spatial dims are multiples of ``factor``."""
    h, w = x.shape[-2:]
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h == 0 and pad_w == 0:
        return x, (0, 0)
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode), (pad_h, pad_w)


def crop(x: torch.Tensor, pad: tuple[int, int]) -> torch.Tensor:
    pad_h, pad_w = pad
    h, w = x.shape[-2:]
    return x[..., : h - pad_h, : w - pad_w]


def _down(cin, cout):
    return nn.Conv2d(cin, cout, 5, stride=2, padding=2)


def _up(cin, cout):
    return nn.ConvTranspose2d(cin, cout, 5, stride=2, padding=2, output_padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, channels: int, out_channels: int, stages: int,
                 res_blocks: int = 1):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(stages):
            last = i == stages - 1
            layers.append(_down(c, out_channels if last else channels))
            if not last:
                layers += [ResidualBlock(channels) for _ in range(res_blocks)]
                layers.append(nn.LeakyReLU(0.1))
            c = channels
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, in_channels: int, channels: int, out_channels: int, stages: int,
                 res_blocks: int = 1):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(stages):
            last = i == stages - 1
            layers.append(_up(c, out_channels if last else channels))
            if not last:
                layers.append(nn.LeakyReLU(0.1))
                layers += [ResidualBlock(channels) for _ in range(res_blocks)]
            c = channels
        self.net = nn.Sequential(*layers)

    def forward(self, y):
        return self.net(y)


class HyperAnalysis(nn.Module):
    def __init__(self, latent_channels: int, hyper_channels: int, stages: int):
        super().__init__()
        layers = [nn.Conv2d(latent_channels, hyper_channels, 3, padding=1)]
        for _ in range(stages):
            layers += [nn.LeakyReLU(0.1), _down(hyper_channels, hyper_channels)]
        self.net = nn.Sequential(*layers)

    def forward(self, y):
        return self.net(y)


class Autoencoder(nn.Module):
    """Encoder (image -> y -> z) and decoder (y_hat -> x_hat)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        c = config
        self.config = config
        self.g_a = Encoder(3, c.ae_channels, c.latent_channels, c.latent_downsample, c.res_blocks)
        self.h_a = HyperAnalysis(c.latent_channels, c.hyper_channels, c.hyper_downsample)
        self.g_s = Decoder(c.latent_channels, c.ae_channels, 3, c.latent_downsample, c.res_blocks)

    def check_input(self, x: torch.Tensor) -> None:
        f = self.config.hyper_factor
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a [B, 3, H, W] image batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % f or w % f:
            raise ValueError(
                f"image {h}x{w} is not divisible by {f}; pad by ({(-h) % f}, {(-w) % f}) "
                "rows/cols, e.g. with pad_to_multiple")

    def encode(self, x: torch.Tensor) -> LatentPair:
        self.check_input(x)
        y = self.g_a(x)
        return LatentPair(y, self.h_a(y))

    def decode(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.ndim != 4 or y_hat.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"expected [B, {self.config.latent_channels}, h, w] latent, got {tuple(y_hat.shape)}")
        return self.g_s(y_hat)
