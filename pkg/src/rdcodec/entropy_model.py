"""Probability models for the quantized latents.

``z_hat`` uses a learned per-channel factorized prior; ``y_hat`` uses a
Gaussian conditional whose mean and scale come from the hyper-synthesis
transform. Both provide likelihoods for the rate loss and 16-bit CDF tables
for the range coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr
from torch import nn
import torch.nn.functional as F

from .coding import CdfTable, table_from_pmf

SIGMA_MIN = 0.01
SIGMA_MAX = 64.0
P_MIN = 2.0**-16
TAIL_MAX = 64
# half-width of a Gaussian table in units of sigma
SUPPORT_SIGMAS = 8.0


@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def integer_bin_likelihood(v_hat: torch.Tensor, params: GaussianParams,
                           p_min: float = P_MIN) -> torch.Tensor:
    """Mass of ``N(mu, sigma)`` on ``[v_hat - 1/2, v_hat + 1/2]``, floored at ``p_min``."""
    # evaluate on the left tail where erfc keeps its precision
    d = torch.abs(v_hat - params.mu)
    upper = _std_normal_cdf((0.5 - d) / params.sigma)
    lower = _std_normal_cdf((-0.5 - d) / params.sigma)
    return torch.clamp(upper - lower, min=p_min)


def bitrate_estimate(likelihoods_y: torch.Tensor, likelihoods_z: torch.Tensor,
                     num_pixels: int, p_min: float = P_MIN) -> torch.Tensor:
    """Bits per pixel implied by the likelihoods; ``num_pixels`` counts the whole batch."""
    bits = -(torch.log2(torch.clamp(likelihoods_y, min=p_min)).sum()
             + torch.log2(torch.clamp(likelihoods_z, min=p_min)).sum())
    return bits / num_pixels


class HyperSynthesis(nn.Module):
    """z_hat -> (mu, sigma) for y."""

    def __init__(self, hyper_channels: int, latent_channels: int, stages: int,
                 sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                 scale_only: bool = False):
        super().__init__()
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.scale_only = scale_only
        self.latent_channels = latent_channels
        layers = []
        for _ in range(stages):
            layers += [nn.ConvTranspose2d(hyper_channels, hyper_channels, 5, stride=2, padding=2,
                                          output_padding=1), nn.LeakyReLU(0.1)]
        out = latent_channels * (1 if scale_only else 2)
        layers.append(nn.Conv2d(hyper_channels, out, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z_hat: torch.Tensor) -> GaussianParams:
        h = self.net(z_hat)
        if self.scale_only:
            mu, raw = torch.zeros_like(h), h
        else:
            mu, raw = h.chunk(2, dim=1)
        sigma = torch.clamp(F.softplus(raw) + self.sigma_min, max=self.sigma_max)
        return GaussianParams(mu, sigma)


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF built from monotone dense layers (Balle et al. 2018)."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0,
                 tail_max: int = TAIL_MAX, p_min: float = P_MIN):
        super().__init__()
        self.channels = channels
        self.tail_max = tail_max
        self.p_min = p_min
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, N]
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m), x) + b
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def _to_channel_rows(self, v: torch.Tensor) -> torch.Tensor:
        if v.ndim != 4 or v.shape[1] != self.channels:
            raise ValueError(f"expected [B, {self.channels}, h, w], got {tuple(v.shape)}")
        return v.permute(1, 0, 2, 3).reshape(self.channels, 1, -1)

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self._logits_cumulative(self._to_channel_rows(v))).reshape(
            v.shape[1], v.shape[0], *v.shape[2:]).permute(1, 0, 2, 3)

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        rows = self._to_channel_rows(z_hat)
        lower = self._logits_cumulative(rows - 0.5)
        upper = self._logits_cumulative(rows + 0.5)
        # evaluate on the side of the median where sigmoid differences are precise
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.reshape(z_hat.shape[1], z_hat.shape[0], *z_hat.shape[2:]).permute(1, 0, 2, 3)
        return torch.clamp(p, min=self.p_min)

    @torch.no_grad()
    def cdf_tables(self) -> list[CdfTable]:
        """One table per channel over the integers where the prior has mass."""
        k = torch.arange(-self.tail_max, self.tail_max + 1, dtype=torch.float64)
        grid = k.reshape(1, 1, -1).expand(self.channels, 1, -1)
        edges = torch.cat([grid - 0.5, grid[..., -1:] + 0.5], dim=-1)
        params = [(m.double(), b.double()) for m, b in zip(self.matrices, self.biases)]
        factors = [f.double() for f in self.factors]
        x = edges
        for i, (m, b) in enumerate(params):
            x = torch.matmul(F.softplus(m), x) + b
            if i < len(factors):
                x = x + torch.tanh(factors[i]) * torch.tanh(x)
        c = torch.sigmoid(x).squeeze(1).numpy()  # [C, 2*tail_max + 2]
        tables = []
        for ch in range(self.channels):
            pmf = np.diff(c[ch])
            keep = np.flatnonzero(pmf >= self.p_min / 2)
            lo, hi = (keep[0], keep[-1]) if len(keep) else (self.tail_max, self.tail_max)
            body = pmf[lo:hi + 1]
            tail = max(1.0 - body.sum(), 0.0)
            tables.append(table_from_pmf(np.append(body, tail), int(k[lo])))
        return tables


def gaussian_cdf_tables(mu: np.ndarray, sigma: np.ndarray, tail_max: int = TAIL_MAX,
                        support_sigmas: float = SUPPORT_SIGMAS) -> list[CdfTable]:
    """Per-element tables for integer symbols under ``N(mu, sigma)``.

    Each table covers ``round(mu) +- min(tail_max, ceil(support_sigmas * sigma))``;
    everything else goes to the escape bin.
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if mu.shape != sigma.shape:
        raise ValueError("mu and sigma must have the same number of elements")
    center = np.floor(mu + 0.5)
    half = np.clip(np.ceil(support_sigmas * sigma), 1, tail_max).astype(np.int64)
    hmax = int(half.max()) if len(half) else 1
    k = np.arange(-hmax, hmax + 1)
    v = center[:, None] + k[None, :]
    d = np.abs(v - mu[:, None])
    pmf = ndtr((0.5 - d) / sigma[:, None]) - ndtr((-0.5 - d) / sigma[:, None])
    tables = []
    for i in range(len(mu)):
        h = half[i]
        body = pmf[i, hmax - h:hmax + h + 1]
        tail = max(1.0 - body.sum(), 0.0)
        tables.append(table_from_pmf(np.append(body, tail), int(center[i]) - int(h)))
    return tables
