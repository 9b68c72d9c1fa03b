"""The full codec: autoencoder, entropy models and residual denoiser, plus
compress/decompress and checkpoint I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .autoencoder import (
    Autoencoder,
    CodecConfig,
    LatentPair,
    QuantMode,
    combine,
    crop,
    pad_to_multiple,
    pseudo_quantize,
)
from .coding import Bitstream, Header, range_decode, range_encode, read_bitstream
from .denoiser import ConditionalUNet
from .diffusion import NoiseSchedule, make_cosine_schedule, make_linear_schedule
from .entropy_model import (
    FactorizedPrior,
    GaussianParams,
    HyperSynthesis,
    bitrate_estimate,
    gaussian_cdf_tables,
    integer_bin_likelihood,
)
from .sampling import SamplerConfig, sample_residual

CHECKPOINT_FORMAT = "rdcodec.checkpoint"
CHECKPOINT_VERSION = 1


class CompatibilityError(ValueError):
    """Bitstream and model were produced with different configurations."""


class CheckpointError(ValueError):
    pass


def make_schedule(config: CodecConfig) -> NoiseSchedule:
    if config.schedule == "linear":
        return make_linear_schedule(config.timesteps, config.beta_start, config.beta_end)
    if config.schedule == "cosine":
        return make_cosine_schedule(config.timesteps)
    raise ValueError(f"unknown schedule {config.schedule!r}")


@dataclass
class TrainOutputs:
    """Intermediate tensors of one forward pass in training mode."""

    y_hat: torch.Tensor
    z_hat: torch.Tensor
    x_hat: torch.Tensor
    likelihoods_y: torch.Tensor
    likelihoods_z: torch.Tensor
    bpp: torch.Tensor


class HyperpriorCodec(nn.Module):
    """Autoencoder with factorized hyperprior and Gaussian conditional."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = c = config or CodecConfig()
        self.autoencoder = Autoencoder(c)
        self.hyper_synthesis = HyperSynthesis(c.hyper_channels, c.latent_channels, c.hyper_downsample,
                                              c.sigma_min, c.sigma_max, c.scale_only)
        self.prior = FactorizedPrior(c.hyper_channels, tail_max=c.tail_max, p_min=c.likelihood_floor)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        ae = self.autoencoder
        return {
            "encoder": list(ae.g_a.parameters()),
            "hyper_encoder": list(ae.h_a.parameters()),
            "decoder": list(ae.g_s.parameters()),
            "hyper_decoder": list(self.hyper_synthesis.parameters()),
            "prior": list(self.prior.parameters()),
        }

    def encode(self, x: torch.Tensor) -> LatentPair:
        return self.autoencoder.encode(x)

    def decode(self, y_hat: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.decode(y_hat)

    def hyper_synthesize(self, z_hat: torch.Tensor) -> GaussianParams:
        return self.hyper_synthesis(z_hat)

    def rate_forward(self, x: torch.Tensor, mode: QuantMode | str = QuantMode.TRAIN,
                     generator: torch.Generator | None = None) -> TrainOutputs:
        """Encode, quantize (noise or rounding), decode and evaluate likelihoods."""
        y, z = self.encode(x)
        y_hat = pseudo_quantize(y, mode, generator)
        z_hat = pseudo_quantize(z, mode, generator)
        params = self.hyper_synthesize(z_hat)
        lik_y = integer_bin_likelihood(y_hat, params, self.config.likelihood_floor)
        lik_z = self.prior.likelihood(z_hat)
        x_hat = self.decode(y_hat)
        num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
        bpp = bitrate_estimate(lik_y, lik_z, num_pixels, self.config.likelihood_floor)
        return TrainOutputs(y_hat, z_hat, x_hat, lik_y, lik_z, bpp)


class ResidualDiffusionCodec(HyperpriorCodec):
    """Hyperprior codec plus a latent-conditioned residual denoiser."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__(config)
        c = self.config
        self.denoiser = ConditionalUNet(c.latent_channels, c.unet_width, c.unet_mults, c.unet_blocks,
                                        latent_factor=c.latent_factor,
                                        parameterization=c.parameterization)
        self.schedule = make_schedule(c)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = super().parameter_groups()
        groups["denoiser"] = list(self.denoiser.parameters())
        return groups

    @torch.no_grad()
    def reconstruct(self, y_hat: torch.Tensor, cfg: SamplerConfig,
                    generator: torch.Generator | None = None, clamp: bool = True) -> torch.Tensor:
        """Decoder output plus sampled residual."""
        x_hat = self.decode(y_hat)
        r = sample_residual(y_hat, self.denoiser, self.schedule, cfg, generator, shape=x_hat.shape)
        return combine(x_hat, r, clamp=clamp)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"compress takes a single [3, H, W] image, got {tuple(x.shape)}")
    return x


def _flat(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().ravel()


@torch.no_grad()
def compress(x: torch.Tensor, model: HyperpriorCodec) -> Bitstream:
    """Encode one image. ``z`` is coded first, then ``y`` under the hyperprior."""
    c = model.config
    x = _as_batch(x)
    height, width = x.shape[-2:]
    x, (pad_h, pad_w) = pad_to_multiple(x, c.hyper_factor)
    y, z = model.encode(x)
    y_hat = pseudo_quantize(y, QuantMode.INFER)
    z_hat = pseudo_quantize(z, QuantMode.INFER)

    z_tables = model.prior.cdf_tables()
    per_z = z_hat.shape[2] * z_hat.shape[3]
    z_bytes = range_encode(_flat(z_hat).astype(np.int64),
                           [z_tables[ch] for ch in range(z_hat.shape[1]) for _ in range(per_z)])

    params = model.hyper_synthesize(z_hat)
    y_tables = gaussian_cdf_tables(_flat(params.mu), _flat(params.sigma), c.tail_max)
    y_bytes = range_encode(_flat(y_hat).astype(np.int64), y_tables)

    header = Header(
        config_hash=c.digest(), width=width, height=height, pad_h=pad_h, pad_w=pad_w,
        lmbda=c.lmbda, rho=c.rho, steps=c.default_steps, gamma=c.default_gamma,
        y_shape=tuple(y_hat.shape[1:]), z_shape=tuple(z_hat.shape[1:]),
    )
    return Bitstream(header, z_bytes, y_bytes)


@torch.no_grad()
def decode_latents(bs: Bitstream, model: HyperpriorCodec) -> LatentPair:
    c = model.config
    h = bs.header
    if h.config_hash != c.digest():
        raise CompatibilityError("bitstream was produced by a model with a different configuration")
    zc, zh, zw = h.z_shape
    z_tables = model.prior.cdf_tables()
    z_syms = range_decode(bs.z_bytes, [z_tables[ch] for ch in range(zc) for _ in range(zh * zw)])
    z_hat = torch.tensor(z_syms, dtype=torch.float32).reshape(1, zc, zh, zw)

    params = model.hyper_synthesize(z_hat)
    y_tables = gaussian_cdf_tables(_flat(params.mu), _flat(params.sigma), c.tail_max)
    y_syms = range_decode(bs.y_bytes, y_tables)
    y_hat = torch.tensor(y_syms, dtype=torch.float32).reshape(1, *h.y_shape)
    return LatentPair(y_hat, z_hat)


@torch.no_grad()
def decompress(bs: Bitstream | bytes, model: ResidualDiffusionCodec, cfg: SamplerConfig | None = None,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Rebuild the image as ``clamp(decode(y_hat) + sampled residual)``.

    ``cfg`` defaults to the sampler settings stored in the stream header.
    """
    if isinstance(bs, (bytes, bytearray)):
        bs = read_bitstream(bytes(bs))
    if cfg is None:
        cfg = SamplerConfig(bs.header.steps, bs.header.gamma)
    y_hat, _ = decode_latents(bs, model)
    x_rec = model.reconstruct(y_hat, cfg, generator)
    return crop(x_rec, (bs.header.pad_h, bs.header.pad_w))


@torch.no_grad()
def estimate_bpp(x: torch.Tensor, model: HyperpriorCodec) -> float:
    """Differentiable-model rate estimate evaluated on the rounded latents."""
    x = _as_batch(x)
    height, width = x.shape[-2:]
    x, _ = pad_to_multiple(x, model.config.hyper_factor)
    out = model.rate_forward(x, QuantMode.INFER)
    # rate_forward normalizes by the padded size
    return float(out.bpp) * x.shape[2] * x.shape[3] / (height * width)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | os.PathLike, model: ResidualDiffusionCodec,
                    ema_state: dict | None = None, extra: dict | None = None) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "weights": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "ema": None if ema_state is None else {k: v.detach().cpu() for k, v in ema_state.items()},
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(blob, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a codec checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob.get('version')} is not supported")
    return blob


def load_checkpoint(path: str | os.PathLike, use_ema: bool = True) -> ResidualDiffusionCodec:
    """Load a model; EMA weights are preferred when present."""
    blob = read_checkpoint(path)
    model = ResidualDiffusionCodec(CodecConfig.from_dict(blob["config"]))
    weights = blob["ema"] if use_ema and blob.get("ema") else blob["weights"]
    model.load_state_dict(weights)
    model.eval()
    return model
