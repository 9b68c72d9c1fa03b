"""Residual diffusion on top of a video codec.

Each frame's residual is denoised conditioned on the current backbone
reconstruction, the previous frame and (unless ``nl``) the backbone latent.
Keyframes and predicted frames get separate denoisers, both v-parameterized.
A small conditional-replenishment backbone built from the image codec is
included so the whole pipeline runs without third-party checkpoints.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import torch
from torch import nn

from .autoencoder import CodecConfig, QuantMode, combine, crop, pad_to_multiple
from .codec import CheckpointError, HyperpriorCodec, compress, make_schedule
from .denoiser import ConditionalUNet
from .diffusion import Parameterization, forward_sample, to_x0_eps
from .metrics import psnr
from .sampling import SamplerConfig, sample_residual
from .training import (
    LossBreakdown,
    decoder_mse,
    diffusion_target,
    l1_eps_loss,
    summarize_losses,
    total_loss,
)

VIDEO_SAMPLER = SamplerConfig(num_steps=10, gamma=0.1)
GOP_PERIOD = 9
BACKBONE_FORMAT = "rdcodec.video-backbone"
DENOISER_FORMAT = "rdcodec.video-denoiser"


class FrameKind(str, enum.Enum):
    KEY = "K"
    PREDICTED = "P"


class CondMode(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class SequencingError(RuntimeError):
    """A frame was requested before the output it depends on exists."""


class FrameShapeError(ValueError):
    pass


def gop_flags(n: int, period: int = GOP_PERIOD) -> list[FrameKind]:
    """One keyframe followed by ``period - 1`` predicted frames, repeating."""
    return [FrameKind.KEY if i % period == 0 else FrameKind.PREDICTED for i in range(n)]


class BackboneFrame:
    """What a video backbone hands back for one frame.

    The latent sits behind a property so a stub backbone can refuse access.
    """

    def __init__(self, recon: torch.Tensor, latent: torch.Tensor | None, bits, kind: FrameKind):
        self.recon = recon
        self._latent = latent
        self.bits = bits
        self.kind = FrameKind(kind)

    @property
    def latent(self) -> torch.Tensor:
        if self._latent is None:
            raise AttributeError("backbone did not expose a latent")
        return self._latent


class VideoBackbone(Protocol):
    latent_channels: int
    latent_factor: int

    def code_frame(self, x: torch.Tensor, reference: torch.Tensor | None, kind: FrameKind,
                   mode: QuantMode = QuantMode.INFER,
                   generator: torch.Generator | None = None) -> BackboneFrame: ...

    def parameters(self) -> Iterable[nn.Parameter]: ...


class ToyVideoBackbone(nn.Module):
    """Keyframes go through an image codec; predicted frames code the
    difference to the previous reconstruction with a second codec."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        self.intra = HyperpriorCodec(self.config)
        self.inter = HyperpriorCodec(self.config)
        self.frozen = False

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def latent_factor(self) -> int:
        return self.config.latent_factor

    def freeze(self, frozen: bool = True) -> "ToyVideoBackbone":
        self.frozen = frozen
        for p in self.parameters():
            p.requires_grad_(not frozen)
        return self

    def code_frame(self, x: torch.Tensor, reference: torch.Tensor | None, kind: FrameKind,
                   mode: QuantMode = QuantMode.INFER,
                   generator: torch.Generator | None = None) -> BackboneFrame:
        kind = FrameKind(kind)
        if kind is FrameKind.PREDICTED and reference is None:
            raise SequencingError("predicted frame without a reference")
        codec = self.intra if kind is FrameKind.KEY else self.inter
        target = x if kind is FrameKind.KEY else x - reference
        height, width = x.shape[-2:]
        padded, pad = pad_to_multiple(target, self.config.hyper_factor)
        out = codec.rate_forward(padded, mode, generator)
        recon = crop(out.x_hat, pad)
        if kind is FrameKind.PREDICTED:
            recon = recon + reference
        recon = recon.clamp(0.0, 1.0)
        scale = padded.shape[-2] * padded.shape[-1] / (height * width)
        bits = out.bpp * scale * height * width * x.shape[0]
        if QuantMode(mode) is QuantMode.INFER and x.shape[0] == 1:
            # count what the range coder actually writes
            bits = float(compress(target[0], codec).payload_bits)
        return BackboneFrame(recon, out.y_hat, bits, kind)


@dataclass
class FrameConditioning:
    current: torch.Tensor
    previous: torch.Tensor
    latent: torch.Tensor | None

    def extra(self) -> torch.Tensor:
        return torch.cat([self.current, self.previous], dim=1)

    @property
    def channels(self) -> int:
        n = self.current.shape[1] + self.previous.shape[1]
        return n + (self.latent.shape[1] if self.latent is not None else 0)


def build_conditioning(frames: Sequence[BackboneFrame], i: int, mode: CondMode | str = CondMode.TRAIN,
                       nl: bool = False, outputs: Sequence[torch.Tensor | None] | None = None
                       ) -> FrameConditioning:
    """Conditioning for frame ``i``.

    The previous-frame slot holds the backbone reconstruction of frame ``i-1``
    when training and the enhanced output of frame ``i-1`` at test time. At
    ``i = 0`` there is no previous frame and the slot repeats the current
    reconstruction. ``nl`` leaves the latent out entirely.
    """
    if i < 0 or i >= len(frames):
        raise IndexError(f"frame index {i} out of range for {len(frames)} frames")
    mode = CondMode(mode)
    current = frames[i].recon
    if i == 0:
        previous = current
    elif mode is CondMode.TRAIN:
        previous = frames[i - 1].recon
    else:
        if outputs is None or len(outputs) < i or outputs[i - 1] is None:
            raise SequencingError(f"frame {i} needs the enhanced output of frame {i - 1}")
        previous = outputs[i - 1]
    latent = None if nl else frames[i].latent
    return FrameConditioning(current, previous, latent)


@dataclass
class VideoConfig:
    latent_channels: int = 32
    latent_factor: int = 16
    nl: bool = False
    width: int = 32
    mults: tuple = (1, 2, 2)
    blocks: int = 1
    schedule: str = "linear"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mults"] = list(self.mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VideoConfig":
        d = dict(d)
        d["mults"] = tuple(d.get("mults", cls.mults))
        return cls(**d)


class VideoDiffusionModel(nn.Module):
    """A keyframe denoiser and a predicted-frame denoiser.

    Both see ``[current recon, previous frame]`` concatenated to the noisy
    residual; unless ``nl`` they also get the backbone latent at every level.
    """

    def __init__(self, config: VideoConfig | None = None):
        super().__init__()
        self.config = c = config or VideoConfig()
        latent = 0 if c.nl else c.latent_channels

        def unet():
            return ConditionalUNet(latent, c.width, c.mults, c.blocks, extra_channels=6,
                                   latent_factor=c.latent_factor, parameterization=Parameterization.V)

        self.key = unet()
        self.predicted = unet()
        self.schedule = make_schedule(CodecConfig(schedule=c.schedule, timesteps=c.timesteps,
                                                  beta_start=c.beta_start, beta_end=c.beta_end))

    @property
    def nl(self) -> bool:
        return self.config.nl


def dispatch_model(kind: FrameKind | str, model: VideoDiffusionModel) -> ConditionalUNet:
    return model.key if FrameKind(kind) is FrameKind.KEY else model.predicted


def weights_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training


def code_triplet(backbone: VideoBackbone, triplet: torch.Tensor, mode: QuantMode,
                 generator: torch.Generator | None = None) -> list[BackboneFrame]:
    """Frame 0 of the triplet is coded as a keyframe, the others as predicted."""
    frames = []
    for i in range(triplet.shape[1]):
        kind = FrameKind.KEY if i == 0 else FrameKind.PREDICTED
        ref = frames[-1].recon if frames else None
        frames.append(backbone.code_frame(triplet[:, i], ref, kind, mode, generator))
    return frames


def video_losses(model: VideoDiffusionModel, backbone: VideoBackbone, triplet: torch.Tensor,
                 lmbda: float = 0.0, rho: float = 0.0, perceptual: Callable | None = None,
                 frozen: bool = True, generator: torch.Generator | None = None,
                 step: int | None = None):
    """Loss over a ``[B, F, 3, H, W]`` clip of consecutive frames.

    A frozen backbone runs without gradients and with real rounding; otherwise
    it trains along with the denoisers using noisy quantization.
    """
    if triplet.ndim == 4:
        triplet = triplet.unsqueeze(0)
    s = model.schedule
    if frozen:
        with torch.no_grad():
            frames = code_triplet(backbone, triplet, QuantMode.INFER, generator)
    else:
        frames = code_triplet(backbone, triplet, QuantMode.TRAIN, generator)

    b = triplet.shape[0]
    pixels = triplet.shape[-2] * triplet.shape[-1]
    dist, perc, dec, rate = [], [], [], []
    for i, frame in enumerate(frames):
        x = triplet[:, i]
        cond = build_conditioning(frames, i, CondMode.TRAIN, model.nl)
        r = x - frame.recon
        t = torch.randint(0, s.T, (b,), generator=generator)
        eps = torch.randn(r.shape, generator=generator, dtype=r.dtype)
        r_t = forward_sample(r, t, eps, s)
        net = dispatch_model(frame.kind, model)
        pred = net(r_t, cond.latent, t.to(r.dtype) / s.T, cond.extra())
        dist.append(l1_eps_loss(diffusion_target(Parameterization.V, r, eps, t, s), pred))
        if perceptual is not None:
            x0_hat, _ = to_x0_eps(pred, r_t, t, s, Parameterization.V)
            perc.append(perceptual(x, frame.recon + x0_hat))
        dec.append(decoder_mse(x, frame.recon))
        bits = frame.bits if torch.is_tensor(frame.bits) else torch.tensor(float(frame.bits))
        rate.append(bits / (b * pixels))

    def mean(v):
        return torch.stack(v).mean() if v else torch.zeros(())

    l_dist, l_perc, l_decoder, l_bitrate = mean(dist), mean(perc), mean(dec), mean(rate)
    total = total_loss(l_dist, l_perc if rho > 0 else 0.0, l_decoder, l_bitrate, lmbda, rho)
    parts = dict(l_dist=l_dist, l_perc=l_perc, l_decoder=l_decoder, l_bitrate=l_bitrate, total=total)
    return summarize_losses(parts, step), total


class VideoTrainer:
    """Trains the two denoisers, optionally together with the backbone.

    ``frozen=True`` is the enhancement setting: backbone weights never change.
    Call ``unfreeze()`` to switch to joint finetuning.
    """

    def __init__(self, model: VideoDiffusionModel, backbone: ToyVideoBackbone, lr: float = 1e-4,
                 lmbda: float = 0.0, rho: float = 0.0, perceptual: Callable | None = None,
                 frozen: bool = True, seed: int = 0, grad_clip: float | None = 1.0):
        self.model = model
        self.backbone = backbone
        self.lmbda, self.rho, self.perceptual = lmbda, rho, perceptual
        self.lr = lr
        self.grad_clip = grad_clip
        self.generator = torch.Generator().manual_seed(seed)
        self.step = 0
        self._set_frozen(frozen)

    def _set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.backbone.freeze(frozen)
        params = list(self.model.parameters())
        if not frozen:
            params += list(self.backbone.parameters())
        self.optimizer = torch.optim.Adam(params, lr=self.lr)

    def unfreeze(self) -> None:
        self._set_frozen(False)

    def train_step(self, triplet: torch.Tensor) -> LossBreakdown:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses, total = video_losses(self.model, self.backbone, triplet, self.lmbda, self.rho,
                                     self.perceptual, self.frozen, self.generator, self.step)
        total.backward()
        if self.grad_clip:
            nn.utils.clip_grad_norm_([p for g in self.optimizer.param_groups for p in g["params"]],
                                     self.grad_clip)
        self.optimizer.step()
        self.step += 1
        return losses


# the training step as a plain function, for callers that manage their own state
def video_training_step(trainer: VideoTrainer, triplet: torch.Tensor) -> LossBreakdown:
    return trainer.train_step(triplet)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class FrameRecord:
    index: int
    kind: str
    bpp: float
    psnr: float
    psnr_backbone: float
    lpips: float | None
    mean_color_delta: float


@dataclass
class EnhancedVideo:
    frames: torch.Tensor
    backbone_frames: torch.Tensor
    records: list[FrameRecord]


def mean_color_delta(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean absolute difference of the per-channel means of two frames."""
    return float((x.mean(dim=(-2, -1)) - y.mean(dim=(-2, -1))).abs().mean())


@torch.no_grad()
def enhance_video(frames: torch.Tensor | Sequence[torch.Tensor], backbone: VideoBackbone,
                  model: VideoDiffusionModel, cfg: SamplerConfig | None = None,
                  generator: torch.Generator | None = None, lpips: Callable | None = None,
                  period: int = GOP_PERIOD) -> EnhancedVideo:
    """Code ``frames`` with the backbone and enhance them one at a time.

    Frame ``i`` only ever sees frames ``0..i``. Every frame must have the
    shape of the first one.
    """
    cfg = cfg or VIDEO_SAMPLER
    kinds = gop_flags(len(frames), period)
    shape = tuple(frames[0].shape)
    coded: list[BackboneFrame] = []
    outputs: list[torch.Tensor] = []
    records = []
    for i, x in enumerate(frames):
        if tuple(x.shape) != shape:
            raise FrameShapeError(f"frame {i} has shape {tuple(x.shape)}, expected {shape}")
        x = x.unsqueeze(0)
        ref = coded[-1].recon if coded else None
        frame = backbone.code_frame(x, ref, kinds[i], QuantMode.INFER)
        coded.append(frame)
        cond = build_conditioning(coded, i, CondMode.TEST, model.nl, outputs)
        net = dispatch_model(kinds[i], model)
        r = sample_residual(cond.latent, net, model.schedule, cfg, generator,
                            shape=tuple(frame.recon.shape), extra=cond.extra())
        out = combine(frame.recon, r)
        outputs.append(out)
        records.append(FrameRecord(
            index=i, kind=kinds[i].value,
            bpp=float(frame.bits) / (shape[-2] * shape[-1]),
            psnr=psnr(x[0], out[0]), psnr_backbone=psnr(x[0], frame.recon[0]),
            lpips=float(lpips(x, out)) if lpips is not None else None,
            mean_color_delta=mean_color_delta(out[0], x[0]),
        ))
    return EnhancedVideo(torch.cat(outputs), torch.cat([f.recon for f in coded]), records)


# ---------------------------------------------------------------------------
# checkpoints


def _save(path, fmt: str, config: dict, module: nn.Module) -> None:
    blob = {"format": fmt, "version": 1, "config": config,
            "weights": {k: v.detach().cpu() for k, v in module.state_dict().items()}}
    tmp = f"{path}.tmp"
    torch.save(blob, tmp)
    os.replace(tmp, path)


def _load(path, fmt: str) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != fmt:
        raise CheckpointError(f"{path} is not a {fmt} checkpoint")
    if blob.get("version") != 1:
        raise CheckpointError(f"checkpoint version {blob.get('version')} is not supported")
    return blob


def save_backbone(path: str | os.PathLike, backbone: ToyVideoBackbone) -> None:
    _save(path, BACKBONE_FORMAT, backbone.config.to_dict(), backbone)


def load_backbone(path: str | os.PathLike) -> ToyVideoBackbone:
    blob = _load(path, BACKBONE_FORMAT)
    backbone = ToyVideoBackbone(CodecConfig.from_dict(blob["config"]))
    backbone.load_state_dict(blob["weights"])
    return backbone.eval()


def save_video_model(path: str | os.PathLike, model: VideoDiffusionModel) -> None:
    _save(path, DENOISER_FORMAT, model.config.to_dict(), model)


def load_video_model(path: str | os.PathLike) -> VideoDiffusionModel:
    blob = _load(path, DENOISER_FORMAT)
    model = VideoDiffusionModel(VideoConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["weights"])
    return model.eval()
