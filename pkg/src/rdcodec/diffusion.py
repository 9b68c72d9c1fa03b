"""Model-free diffusion arithmetic.

Conventions used throughout the package:

* Timesteps are 0-based indices ``t in [0, T)``. ``alpha_bar[t]`` is the
  cumulative product ``prod_{s<=t} (1 - beta[s])``.
* The index ``-1`` denotes the clean signal (``alpha_bar = 1``). A sampler
  stepping to ``t_prev = -1`` therefore returns its ``x0`` estimate.
* ``x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

# Floor for square roots and divisions.
NUMERIC_FLOOR = 1e-12

Index = Union[int, torch.Tensor]


class Parameterization(str, enum.Enum):
    EPSILON = "epsilon"
    X0 = "x0"
    V = "v"


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or beta.shape != alpha_bar.shape:
            raise ValueError("beta and alpha_bar must be 1-D arrays of equal length")
        if len(beta) < 2:
            raise ValueError("a schedule needs at least two steps")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("beta must lie strictly inside (0, 1)")
        if not np.all(np.diff(alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        return cls(beta=beta, alpha_bar=np.cumprod(1.0 - beta))

    def alpha_bar_at(self, t: Index, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar`` at index ``t`` (``-1`` gives 1), broadcastable against ``like``.

        ``t`` may be a python int or a 1-D tensor holding one index per batch item.
        """
        table = torch.as_tensor(
            np.concatenate([[1.0], self.alpha_bar]), dtype=like.dtype, device=like.device
        )
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            if t.ndim != 1 or t.shape[0] != like.shape[0]:
                raise ValueError("per-sample timesteps must be a 1-D tensor matching the batch")
            self._check_index(int(t.min()), int(t.max()))
            out = table[t.long() + 1]
            return out.reshape((-1,) + (1,) * (like.ndim - 1))
        t = int(t)
        self._check_index(t, t)
        return table[t + 1]

    def _check_index(self, lo: int, hi: int) -> None:
        if lo < -1 or hi >= self.T:
            raise IndexError(f"timestep out of range [-1, {self.T - 1}]: {lo}..{hi}")


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def make_cosine_schedule(T: int = 1000, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule of Nichol & Dhariwal; optional, never the default."""
    if T < 2:
        raise ValueError("T must be at least 2")
    f = lambda u: math.cos((u / T + offset) / (1 + offset) * math.pi / 2) ** 2  # noqa: E731
    beta = [min(1 - f(i + 1) / f(i), max_beta) for i in range(T)]
    return NoiseSchedule.from_betas(beta)


def _sqrt(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp(x, min=NUMERIC_FLOOR))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(x0: torch.Tensor, t: Index, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(x0, eps)
    ab = s.alpha_bar_at(t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def predict_x0_from_eps(x_t: torch.Tensor, eps_hat: torch.Tensor, t: Index, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(x_t, eps_hat)
    ab = s.alpha_bar_at(t, x_t)
    if torch.any(ab < NUMERIC_FLOOR):
        raise ZeroDivisionError(f"alpha_bar at t={t} is below the numeric floor")
    return (x_t - torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(ab)


def predict_eps_from_x0(x_t: torch.Tensor, x0_hat: torch.Tensor, t: Index, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(x_t, x0_hat)
    ab = s.alpha_bar_at(t, x_t)
    return (x_t - torch.sqrt(ab) * x0_hat) / _sqrt(1 - ab)


def v_convert(x0: torch.Tensor, eps: torch.Tensor, t: Index, s: NoiseSchedule) -> torch.Tensor:
    """v = sqrt(alpha_bar) * eps - sqrt(1 - alpha_bar) * x0."""
    _check_same_shape(x0, eps)
    ab = s.alpha_bar_at(t, x0)
    return torch.sqrt(ab) * eps - torch.sqrt(1 - ab) * x0


def x0_eps_from_v(x_t: torch.Tensor, v_hat: torch.Tensor, t: Index, s: NoiseSchedule):
    """Invert the (x0, eps) -> (x_t, v) rotation. Returns ``(x0_hat, eps_hat)``."""
    _check_same_shape(x_t, v_hat)
    ab = s.alpha_bar_at(t, x_t)
    a, b = torch.sqrt(ab), torch.sqrt(1 - ab)
    # rotation by angle phi with cos = a, sin = b; a^2 + b^2 = 1
    return a * x_t - b * v_hat, b * x_t + a * v_hat


def to_x0_eps(prediction: torch.Tensor, x_t: torch.Tensor, t: Index, s: NoiseSchedule,
              kind: Parameterization):
    """Convert a network output of any parameterization to ``(x0_hat, eps_hat)``."""
    kind = Parameterization(kind)
    if kind is Parameterization.EPSILON:
        return predict_x0_from_eps(x_t, prediction, t, s), prediction
    if kind is Parameterization.X0:
        return prediction, predict_eps_from_x0(x_t, prediction, t, s)
    return x0_eps_from_v(x_t, prediction, t, s)


def ddim_sigma(t: Index, t_prev: Index, s: NoiseSchedule, eta: float, like: torch.Tensor) -> torch.Tensor:
    ab = s.alpha_bar_at(t, like)
    ab_prev = s.alpha_bar_at(t_prev, like)
    return eta * _sqrt((1 - ab_prev) / torch.clamp(1 - ab, min=NUMERIC_FLOOR) * (1 - ab / ab_prev))


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule,
              eta: float = 0.0, noise: torch.Tensor | None = None,
              x0_hat: torch.Tensor | None = None) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = -1`` is the clean signal).

    ``x0_hat`` may be supplied when the network predicts it directly; otherwise it
    is derived from ``eps_hat``.
    """
    if not t_prev < t:
        raise ValueError(f"DDIM requires t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if eta > 0 and noise is None:
        raise ValueError("eta > 0 requires a noise tensor")
    if x0_hat is None:
        x0_hat = predict_x0_from_eps(x_t, eps_hat, t, s)
    ab_prev = s.alpha_bar_at(t_prev, x_t)
    if eta == 0:
        return torch.sqrt(ab_prev) * x0_hat + torch.sqrt(1 - ab_prev) * eps_hat
    sigma = ddim_sigma(t, t_prev, s, eta, x_t)
    _check_same_shape(x_t, noise)
    direction = torch.sqrt(torch.clamp(1 - ab_prev - sigma**2, min=0.0))
    return torch.sqrt(ab_prev) * x0_hat + direction * eps_hat + sigma * noise


def ddpm_ancestral_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule,
                        noise: torch.Tensor) -> torch.Tensor:
    """Ancestral DDPM step ``t -> t - 1`` using the posterior variance ``beta_tilde``."""
    ab = s.alpha_bar_at(t, x_t)
    ab_prev = s.alpha_bar_at(t - 1, x_t)
    beta_t = 1 - ab / ab_prev
    x0_hat = predict_x0_from_eps(x_t, eps_hat, t, s)
    mean = (torch.sqrt(ab_prev) * beta_t / (1 - ab)) * x0_hat \
        + (torch.sqrt(1 - beta_t) * (1 - ab_prev) / (1 - ab)) * x_t
    var = beta_t * (1 - ab_prev) / (1 - ab)
    return mean + torch.sqrt(var) * noise


def subsample_timesteps(T: int, N: int) -> list[int]:
    """N evenly spaced, strictly decreasing indices from ``T - 1`` down to 0.

    ``N = 1`` yields ``[T - 1]``: the single step then jumps straight to the clean signal.
    """
    if not 1 <= N <= T:
        raise ValueError(f"need 1 <= N <= T, got N={N}, T={T}")
    if N == 1:
        return [T - 1]
    return [int(i) for i in np.round(np.linspace(T - 1, 0, N))]
