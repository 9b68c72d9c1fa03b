"""
Compressing an image end to end
===============================

Trains a very small codec for a few hundred steps on one synthetic picture,
writes an ``.rdc`` stream and decodes it with different sampler settings.
The model is far too small and too briefly trained to be good. The point is
the round trip and the knobs.

Takes about a minute on one CPU core.
"""

import math
import tempfile
from pathlib import Path

import torch

from rdcodec import (
    CodecConfig,
    ResidualDiffusionCodec,
    SamplerConfig,
    Trainer,
    TrainPlan,
    compress,
    decompress,
    estimate_bpp,
    load_checkpoint,
    read_bitstream,
    save_checkpoint,
)
from rdcodec.metrics import psnr
from rdcodec.training import random_crops

torch.manual_seed(0)

# smooth color gradients plus a few sharp stripes
yy, xx = torch.meshgrid(torch.linspace(0, 1, 128), torch.linspace(0, 1, 128), indexing="ij")
image = torch.stack([
    0.5 + 0.4 * torch.sin(2 * math.pi * (xx + 0.3 * yy)),
    0.5 + 0.4 * torch.cos(3 * math.pi * yy),
    (torch.sin(24 * xx) > 0.7).float() * 0.6 + 0.2 * yy,
]).clamp(0, 1)

config = CodecConfig(ae_channels=8, latent_channels=16, hyper_channels=8, unet_width=8,
                     parameterization="v", lmbda=1e-4, default_steps=10, default_gamma=0.0)
model = ResidualDiffusionCodec(config)
plan = TrainPlan(lr_init=1e-3, lr_floor=1e-4, lambda_warmup=1e-4, lambda_target=1e-4,
                 rho_target=0.0, time_scale=1e-9, batch_size=1, ema_decay=0.9)
trainer = Trainer(model, plan, seed=0)

crops = random_crops([image], 64, 1, generator=torch.Generator().manual_seed(0))
for step in range(600):
    loss = trainer.train_step(next(crops))
    if step % 200 == 0:
        print(f"step {step:4d}  decoder mse {loss.l_decoder:.4f}  bits {loss.l_bitrate:.3f}")

###############################################################################
# Save, reload and compress
workdir = Path(tempfile.mkdtemp())
save_checkpoint(workdir / "model.pt", trainer.model, trainer.ema.shadow)
model = load_checkpoint(workdir / "model.pt", use_ema=False)

stream = compress(image, model)
(workdir / "image.rdc").write_bytes(stream.to_bytes())
print(f"\nstream         {stream.num_bytes} bytes, {stream.bpp:.3f} bpp")
print(f"payload only   {stream.payload_bits / (128 * 128):.3f} bpp")
print(f"model estimate {estimate_bpp(image, model):.3f} bpp")

###############################################################################
# The stream header remembers the default sampler, so decoding needs no flags.
# Zero steps gives the plain decoder output. After this short run the
# deterministic start (gamma=0) already helps, while a noisy start still hurts.
stream = read_bitstream((workdir / "image.rdc").read_bytes())
for cfg in (SamplerConfig(0, gamma=0.0), None, SamplerConfig(10, gamma=0.8)):
    out = decompress(stream, model, cfg, generator=torch.Generator().manual_seed(0))
    label = "header default" if cfg is None else f"steps={cfg.num_steps} gamma={cfg.gamma}"
    print(f"{label:22s} psnr {psnr(image, out[0]):.2f} dB")
