"""Learned image codec with a hyperprior entropy model and a latent-conditioned
residual diffusion decoder."""

__version__ = "0.1.0"

from .autoencoder import CodecConfig, QuantMode
from .codec import (
    CompatibilityError,
    HyperpriorCodec,
    ResidualDiffusionCodec,
    compress,
    decompress,
    estimate_bpp,
    load_checkpoint,
    save_checkpoint,
)
from .coding import Bitstream, read_bitstream, write_bitstream
from .sampling import SamplerConfig, sample_residual
from .training import Trainer, TrainPlan, apply_schedules

__all__ = [
    "Bitstream",
    "CodecConfig",
    "CompatibilityError",
    "HyperpriorCodec",
    "QuantMode",
    "ResidualDiffusionCodec",
    "SamplerConfig",
    "TrainPlan",
    "Trainer",
    "apply_schedules",
    "compress",
    "decompress",
    "estimate_bpp",
    "load_checkpoint",
    "read_bitstream",
    "sample_residual",
    "save_checkpoint",
    "write_bitstream",
]
