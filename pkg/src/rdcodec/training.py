"""Joint training of encoder, decoder, entropy models and residual denoiser."""

from __future__ import annotations

import copy
import csv
import dataclasses
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator

import torch
from torch import nn

from .autoencoder import QuantMode
from .codec import ResidualDiffusionCodec
from .diffusion import Parameterization, forward_sample, to_x0_eps, v_convert
from .metrics import GradientPerceptualDistance

LOG_FIELDS = ("step", "lr", "lambda", "rho", "l_dist", "l_perc", "l_decoder", "l_bitrate", "total")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, components: list[str], step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss{where} in: {', '.join(components)}")
        self.components = components


class ConfigurationError(ValueError):
    pass


@dataclass
class LossBreakdown:
    l_dist: float
    l_perc: float
    l_decoder: float
    l_bitrate: float
    total: float


@dataclass
class TrainPlan:
    """Piecewise training schedules. All step boundaries are multiplied by ``time_scale``."""

    lr_init: float = 5e-5
    lr_decay: float = 1e-5
    lr_decay_every: int = 100_000
    lr_floor: float = 2e-5
    lambda_warmup: float = 1e-5
    warmup_steps: int = 500_000
    lambda_target: float = 1e-3
    rho_target: float = 0.5
    phase_one_steps: int = 1_000_000
    total_steps: int = 2_000_000
    batch_size: int = 4
    crop_size: int = 256
    ema_decay: float = 0.999
    time_scale: float = 1.0
    grad_clip: float | None = 1.0
    decoder_grad_to_encoder: bool = True
    adam_betas: tuple = (0.9, 0.999)

    def scaled(self, steps: int) -> int:
        return max(1, int(round(steps * self.time_scale)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def apply_schedules(step: int, plan: TrainPlan | None = None) -> tuple[float, float, float]:
    """``(lr, lambda, rho)`` at ``step``.

    The learning rate drops by ``lr_decay`` every ``lr_decay_every`` steps down
    to ``lr_floor``; lambda stays at its warm-up value for ``warmup_steps``;
    rho is zero for the first ``phase_one_steps`` and the target afterwards.
    """
    plan = plan or TrainPlan()
    drops = step // plan.scaled(plan.lr_decay_every)
    # round away float noise from repeated decrements
    lr = max(plan.lr_floor, round(plan.lr_init - drops * plan.lr_decay, 15))
    lmbda = plan.lambda_warmup if step < plan.scaled(plan.warmup_steps) else plan.lambda_target
    rho = 0.0 if step < plan.scaled(plan.phase_one_steps) else plan.rho_target
    return lr, lmbda, rho


def l1_eps_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(eps - eps_hat))


def decoder_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return torch.mean((x - x_hat) ** 2)


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, r0_hat: torch.Tensor,
                    metric: Callable | None) -> torch.Tensor:
    """``metric(x, x_hat + r0_hat)`` without clamping the sum."""
    if metric is None:
        raise ConfigurationError("perceptual loss needs a metric adapter")
    return metric(x, x_hat + r0_hat)


def total_loss(l_dist, l_perc, l_decoder, l_bitrate, lmbda: float, rho: float):
    return (1 - rho) * l_dist + rho * l_perc + lmbda * l_bitrate + l_decoder


def ema_update(shadow: dict, weights: dict, decay: float) -> dict:
    """In place: ``shadow = decay * shadow + (1 - decay) * weights``."""
    with torch.no_grad():
        for name, w in weights.items():
            if torch.is_floating_point(w):
                shadow[name].mul_(decay).add_(w.detach(), alpha=1 - decay)
            else:
                shadow[name].copy_(w)
    return shadow


def diffusion_target(kind: Parameterization, x0: torch.Tensor, eps: torch.Tensor, t, schedule):
    kind = Parameterization(kind)
    if kind is Parameterization.EPSILON:
        return eps
    if kind is Parameterization.X0:
        return x0
    return v_convert(x0, eps, t, schedule)


def summarize_losses(parts: dict, step: int | None) -> LossBreakdown:
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLossError(bad, step)
    return LossBreakdown(**values)


def compute_losses(model: ResidualDiffusionCodec, x: torch.Tensor, lmbda: float, rho: float,
                   perceptual: Callable | None, generator: torch.Generator | None = None,
                   decoder_grad_to_encoder: bool = True, step: int | None = None):
    """One forward pass of the training objective. Returns ``(breakdown, total_tensor)``."""
    s = model.schedule
    out = model.rate_forward(x, QuantMode.TRAIN, generator)
    x_hat = out.x_hat
    r = x - x_hat
    b = x.shape[0]
    t = torch.randint(0, s.T, (b,), generator=generator)
    eps = torch.randn(r.shape, generator=generator, dtype=r.dtype)
    r_t = forward_sample(r, t, eps, s)
    kind = model.denoiser.parameterization
    pred = model.denoiser(r_t, out.y_hat, t.to(r.dtype) / s.T)

    l_dist = l1_eps_loss(diffusion_target(kind, r, eps, t, s), pred)
    x0_hat, _ = to_x0_eps(pred, r_t, t, s, kind)
    if rho > 0:
        l_perc = perceptual_loss(x, x_hat, x0_hat, perceptual)
    else:
        with torch.no_grad():
            l_perc = perceptual_loss(x, x_hat, x0_hat, perceptual) if perceptual else torch.zeros(())
    if decoder_grad_to_encoder:
        l_decoder = decoder_mse(x, x_hat)
    else:
        l_decoder = decoder_mse(x, model.decode(out.y_hat.detach()))
    l_bitrate = out.bpp
    total = total_loss(l_dist, l_perc if rho > 0 else 0.0, l_decoder, l_bitrate, lmbda, rho)
    parts = dict(l_dist=l_dist, l_perc=l_perc, l_decoder=l_decoder, l_bitrate=l_bitrate, total=total)
    return summarize_losses(parts, step), total


class EMA:
    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def update(self, model: nn.Module) -> None:
        ema_update(self.shadow, model.state_dict(), self.decay)

    def copy_to(self, model: nn.Module) -> None:
        model.load_state_dict(self.shadow)


class Trainer:
    """Owns the model, optimizer, EMA and RNG; ``train_step`` is the only writer."""

    def __init__(self, model: ResidualDiffusionCodec, plan: TrainPlan | None = None,
                 perceptual: Callable | None = None, seed: int = 0,
                 log_path: str | os.PathLike | None = None):
        self.model = model
        self.plan = plan or TrainPlan()
        self.perceptual = perceptual if perceptual is not None else GradientPerceptualDistance()
        self.generator = torch.Generator().manual_seed(seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=self.plan.lr_init,
                                          betas=tuple(self.plan.adam_betas))
        self.ema = EMA(model, self.plan.ema_decay)
        self.step = 0
        self._log = None
        if log_path is not None:
            new = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
            self._log_file = open(log_path, "a", newline="")
            self._log = csv.writer(self._log_file)
            if new:
                self._log.writerow(LOG_FIELDS)

    def train_step(self, x: torch.Tensor) -> LossBreakdown:
        lr, lmbda, rho = apply_schedules(self.step, self.plan)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses, total = compute_losses(self.model, x, lmbda, rho, self.perceptual, self.generator,
                                       self.plan.decoder_grad_to_encoder, self.step)
        total.backward()
        if self.plan.grad_clip:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.plan.grad_clip)
        self.optimizer.step()
        self.ema.update(self.model)
        if self._log is not None:
            self._log.writerow([self.step, lr, lmbda, rho, losses.l_dist, losses.l_perc,
                                losses.l_decoder, losses.l_bitrate, losses.total])
        self.step += 1
        return losses

    def fit(self, batches: Iterator[torch.Tensor], steps: int, callback=None) -> list[LossBreakdown]:
        history = []
        for _ in range(steps):
            history.append(self.train_step(next(batches)))
            if callback is not None:
                callback(self.step, history[-1])
        if self._log is not None:
            self._log_file.flush()
        return history

    def ema_model(self) -> ResidualDiffusionCodec:
        model = copy.deepcopy(self.model)
        self.ema.copy_to(model)
        return model.eval()

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "plan": self.plan.to_dict(),
        }

    def load_state_dict(self, state: dict, ema: dict | None = None) -> None:
        self.step = state["step"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        if ema is not None:
            self.ema.shadow = {k: v.clone() for k, v in ema.items()}

    def close(self) -> None:
        if self._log is not None:
            self._log_file.close()
            self._log = None


def random_crops(images: list[torch.Tensor], crop: int, batch_size: int,
                 generator: torch.Generator | None = None, multiple: int = 1) -> Iterator[torch.Tensor]:
    """Endless batches of random crops from ``[3, H, W]`` images.

    The crop shrinks to the smallest image side, rounded down to ``multiple``,
    so every batch stacks and fits the network.
    """
    if not images:
        raise ValueError("no training images")
    crop = min([crop] + [min(img.shape[-2:]) for img in images])
    crop -= crop % multiple
    if crop == 0:
        raise ValueError(f"training images must be at least {multiple} pixels on each side")
    while True:
        batch = []
        for _ in range(batch_size):
            img = images[int(torch.randint(len(images), (1,), generator=generator))]
            h, w = img.shape[-2:]
            i = int(torch.randint(h - crop + 1, (1,), generator=generator))
            j = int(torch.randint(w - crop + 1, (1,), generator=generator))
            batch.append(img[:, i:i + crop, j:j + crop])
        yield torch.stack(batch)
