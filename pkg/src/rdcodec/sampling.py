"""Residual sampling loop for the latent-conditioned denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import torch

from .diffusion import (
    NoiseSchedule,
    Parameterization,
    ddim_step,
    predict_x0_from_eps,
    subsample_timesteps,
    to_x0_eps,
)

NAN_CHECK_EVERY = 10


class Denoiser(Protocol):
    parameterization: Parameterization

    def __call__(self, r_t: torch.Tensor, y_hat: torch.Tensor | None, t_norm: torch.Tensor,
                 extra: torch.Tensor | None = None) -> torch.Tensor: ...


class SamplingError(RuntimeError):
    def __init__(self, step: int, t: int):
        super().__init__(f"non-finite residual at sampling step {step} (t={t})")
        self.step = step
        self.t = t


@dataclass
class SamplerConfig:
    """``num_steps = 0`` skips the diffusion model (decoder-only output)."""

    num_steps: int = 100
    gamma: float = 0.8
    eta: float = 0.0

    def __post_init__(self):
        if self.num_steps < 0:
            raise ValueError("num_steps must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


@dataclass
class DiffusionState:
    r_t: torch.Tensor | None = None
    t: int | None = None
    keep_trace: bool = False
    trace: list = field(default_factory=list)


def one_step_r0(r_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Single-step residual estimate used by the perceptual loss."""
    return predict_x0_from_eps(r_t, eps_hat, t, s)


def sample_residual(y_hat: torch.Tensor | None, denoiser: Callable, s: NoiseSchedule,
                    cfg: SamplerConfig, generator: torch.Generator | None = None,
                    shape: tuple | None = None, extra: torch.Tensor | None = None,
                    state: DiffusionState | None = None) -> torch.Tensor:
    """Run the DDIM reverse process from ``r_T = gamma * eps`` to the clean residual.

    ``gamma = 0`` starts from zero and makes the result a deterministic function
    of the inputs. The model sees ``t / T`` as its time input. Pass a
    ``DiffusionState`` to observe the loop variable (and optionally every step).
    """
    if shape is None:
        shape = denoiser.residual_shape(y_hat)
    ref = y_hat if y_hat is not None else extra
    dtype = ref.dtype if ref is not None else torch.float32
    device = ref.device if ref is not None else None
    if cfg.num_steps == 0:
        return torch.zeros(shape, dtype=dtype, device=device)
    if cfg.num_steps > s.T:
        raise ValueError(f"num_steps={cfg.num_steps} exceeds the schedule length {s.T}")
    kind = Parameterization(getattr(denoiser, "parameterization", Parameterization.EPSILON))

    if cfg.gamma > 0:
        r = cfg.gamma * torch.randn(shape, generator=generator, dtype=dtype, device=device)
    else:
        r = torch.zeros(shape, dtype=dtype, device=device)
    steps = subsample_timesteps(s.T, cfg.num_steps)
    b = shape[0]
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        t_norm = torch.full((b,), t / s.T, dtype=dtype, device=device)
        pred = denoiser(r, y_hat, t_norm, extra) if extra is not None else denoiser(r, y_hat, t_norm)
        x0_hat, eps_hat = to_x0_eps(pred, r, t, s, kind)
        noise = None
        if cfg.eta > 0:
            noise = torch.randn(shape, generator=generator, dtype=dtype, device=device)
        r = ddim_step(r, eps_hat, t, t_prev, s, eta=cfg.eta, noise=noise, x0_hat=x0_hat)
        if (i + 1) % NAN_CHECK_EVERY == 0 or t_prev == -1:
            if not torch.isfinite(r).all():
                raise SamplingError(i, t)
        if state is not None:
            state.r_t, state.t = r, t_prev
            if state.keep_trace:
                state.trace.append(r.detach().clone())
    return r
