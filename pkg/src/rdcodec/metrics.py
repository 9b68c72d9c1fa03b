"""Distortion and perception metrics, rate-distortion curves and BD-rate."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
FID_PATCH = 256
LPIPS_WEIGHTS_ENV = "RDCODEC_LPIPS_WEIGHTS"


def _np(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``PSNR_CAP``."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(data_range**2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the last two axes
    k = len(win)
    out = correlate1d(img, win, axis=-1, mode="constant")
    out = correlate1d(out, win, axis=-2, mode="constant")
    lo = k // 2
    hi_h = img.shape[-2] - (k - 1 - lo)
    hi_w = img.shape[-1] - (k - 1 - lo)
    return out[..., lo:hi_h, lo:hi_w]


def _ssim_components(a: np.ndarray, b: np.ndarray, data_range: float, win_size: int,
                     sigma: float, k1=0.01, k2=0.03):
    size = min(win_size, a.shape[-1], a.shape[-2])
    win = _gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with an 11-tap Gaussian window, averaged over channels and pixels."""
    a, b = _np(a), _np(b)
    return _ssim_components(a, b, data_range, win_size, sigma)[0]


def ms_ssim(a, b, data_range: float = 1.0, weights: Sequence[float] = MS_SSIM_WEIGHTS,
            win_size: int = 11, sigma: float = 1.5) -> float:
    """Multi-scale SSIM (Wang et al. 2003) with the standard five weights.

    Inputs are ``[..., H, W]``. Downsampling is a 2x2 average. When an image
    becomes smaller than the window at coarse scales, the window shrinks to
    the image size. Negative per-scale terms are clipped at zero before the
    weighted product.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    levels = len(weights)
    if min(a.shape[-2:]) < 2 ** (levels - 1):
        raise ValueError(f"image too small for {levels} scales")
    values = []
    for i in range(levels):
        s, cs = _ssim_components(a, b, data_range, win_size, sigma)
        values.append(s if i == levels - 1 else cs)
        if i < levels - 1:
            a, b = _avg_pool2(a), _avg_pool2(b)
    values = np.maximum(np.asarray(values), 0.0)
    return float(np.prod(values ** np.asarray(weights)))


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def fid_patches(images: Sequence, patch: int = FID_PATCH) -> list:
    """Non-overlapping ``patch x patch`` tiles from the top-left; remainders are dropped."""
    out = []
    for img in images:
        h, w = img.shape[-2:]
        for i in range(h // patch):
            for j in range(w // patch):
                out.append(img[..., i * patch:(i + 1) * patch, j * patch:(j + 1) * patch])
    return out


# ---------------------------------------------------------------------------
# perceptual distances


class PerceptualMetric(Protocol):
    """``metric(reference, distorted) -> scalar tensor``; argument order is part of the contract."""

    def __call__(self, reference: torch.Tensor, distorted: torch.Tensor) -> torch.Tensor: ...


class MetricUnavailable(RuntimeError):
    pass


class GradientPerceptualDistance(torch.nn.Module):
    """Deterministic, weight-free stand-in for LPIPS.

    For each of ``scales`` resolutions (2x average pooling between them) the
    per-channel gradient magnitude ``sqrt(dx^2 + dy^2 + eps)`` is computed with
    forward differences, and the mean absolute difference between reference and
    distorted magnitudes is taken. The result is the mean over scales. Inputs
    are ``[B, C, H, W]``; nothing is clamped.
    """

    def __init__(self, scales: int = 3, eps: float = 1e-6):
        super().__init__()
        self.scales = scales
        self.eps = eps

    def _magnitude(self, x: torch.Tensor) -> torch.Tensor:
        dx = x[..., :, 1:] - x[..., :, :-1]
        dy = x[..., 1:, :] - x[..., :-1, :]
        return torch.sqrt(dx[..., :-1, :] ** 2 + dy[..., :, :-1] ** 2 + self.eps)

    def forward(self, reference: torch.Tensor, distorted: torch.Tensor) -> torch.Tensor:
        if reference.shape != distorted.shape:
            raise ValueError("reference and distorted must have the same shape")
        total = 0.0
        a, b = reference, distorted
        for i in range(self.scales):
            total = total + torch.mean(torch.abs(self._magnitude(a) - self._magnitude(b)))
            if i < self.scales - 1:
                a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        return total / self.scales


class LPIPSAdapter:
    """Wraps the ``lpips`` package when it and its weights are installed.

    Inputs are expected in ``[0, 1]`` and are mapped to ``[-1, 1]``. The
    linear-layer weights are read from ``weights`` or ``$RDCODEC_LPIPS_WEIGHTS``
    when set, otherwise from the package's bundled copy.
    """

    def __init__(self, net: str = "alex", weights: str | None = None):
        try:
            import lpips  # noqa: PLC0415
        except ImportError as exc:
            raise MetricUnavailable("the lpips package is not installed") from exc
        weights = weights or os.environ.get(LPIPS_WEIGHTS_ENV)
        kwargs = {"model_path": weights} if weights else {}
        try:
            self._model = lpips.LPIPS(net=net, verbose=False, **kwargs).eval()
        except Exception as exc:  # missing backbone weights, no network, ...
            raise MetricUnavailable(f"could not load LPIPS weights: {exc}") from exc

    def __call__(self, reference: torch.Tensor, distorted: torch.Tensor) -> torch.Tensor:
        return self._model(reference * 2 - 1, distorted * 2 - 1).mean()


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    diff = mu1 - mu2
    covmean = linalg.sqrtm(cov1 @ cov2)
    if not np.isfinite(covmean).all():
        offset = np.eye(len(mu1)) * 1e-6
        covmean = linalg.sqrtm((cov1 + offset) @ (cov2 + offset))
    covmean = np.real(covmean)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean))


class FIDAdapter:
    """FID over patches given a feature extractor ``images [N, 3, 256, 256] -> [N, D]``.

    No extractor ships with the package; pass e.g. an Inception pool layer.
    """

    def __init__(self, feature_extractor: Callable[[torch.Tensor], torch.Tensor] | None):
        if feature_extractor is None:
            raise MetricUnavailable("FID needs an external feature extractor")
        self.features = feature_extractor

    def __call__(self, references: Sequence[torch.Tensor], distorted: Sequence[torch.Tensor]) -> float:
        fa = self._stats(fid_patches(references))
        fb = self._stats(fid_patches(distorted))
        return frechet_distance(*fa, *fb)

    def _stats(self, patches):
        if len(patches) < 2:
            raise ValueError("FID needs at least two patches")
        batch = torch.stack([p.reshape(-1, *p.shape[-3:])[0] for p in patches])
        with torch.no_grad():
            feats = self.features(batch).double().cpu().numpy()
        return feats.mean(axis=0), np.cov(feats, rowvar=False)


# ---------------------------------------------------------------------------
# rate-distortion curves


@dataclass
class RDPoint:
    bpp: float
    metrics: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RDCurve:
    points: list
    name: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        for p in self.points:
            for k, v in p.metrics.items():
                if not math.isfinite(v):
                    raise ValueError(f"metric {k} of point at {p.bpp} bpp is not finite")

    def __len__(self):
        return len(self.points)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def values(self, metric: str) -> np.ndarray:
        return np.array([p.metrics[metric] for p in self.points])


class BDRateError(ValueError):
    pass


@dataclass
class BDRateResult:
    percent: float
    method: str  # "cubic", "pchip" or "poly<d>" when fewer than four points
    flags: list = field(default_factory=list)


def _monotone(poly: np.poly1d, lo: float, hi: float) -> bool:
    grid = np.linspace(lo, hi, 257)
    d = np.polyder(poly)(grid)
    return bool(np.all(d >= 0) or np.all(d <= 0))


def bd_rate_report(reference: RDCurve, test: RDCurve, metric: str = "psnr") -> BDRateResult:
    """Bjontegaard delta rate of ``test`` relative to ``reference`` in percent.

    Fits log-rate as a cubic in the metric for both curves and averages the
    difference over the overlapping metric interval. Curves with 2-3 points
    use a lower polynomial degree; if either cubic is not monotone over the
    interval, a piecewise-cubic Hermite interpolant is used instead.
    """
    flags = []
    if len(reference) < 2 or len(test) < 2:
        raise BDRateError("BD-rate needs at least two points per curve")
    q1, q2 = reference.values(metric), test.values(metric)
    r1, r2 = np.log(reference.rates()), np.log(test.rates())
    lo = max(q1.min(), q2.min())
    hi = min(q1.max(), q2.max())
    if not hi > lo:
        raise BDRateError(f"curves do not overlap in {metric}")
    degree = min(3, len(reference) - 1, len(test) - 1)
    if degree < 3:
        flags.append(f"degree reduced to {degree}")
    p1 = np.poly1d(np.polyfit(q1, r1, degree))
    p2 = np.poly1d(np.polyfit(q2, r2, degree))
    method = "cubic" if degree == 3 else f"poly{degree}"
    if _monotone(p1, lo, hi) and _monotone(p2, lo, hi):
        i1 = np.polyint(p1)
        i2 = np.polyint(p2)
        avg = ((i2(hi) - i2(lo)) - (i1(hi) - i1(lo))) / (hi - lo)
    else:
        flags.append("non-monotone polynomial fit, using PCHIP")
        method = "pchip"
        f1 = _pchip(q1, r1)
        f2 = _pchip(q2, r2)
        avg = (f2.integrate(lo, hi) - f1.integrate(lo, hi)) / (hi - lo)
    return BDRateResult(float((np.exp(avg) - 1) * 100), method, flags)


def _pchip(q: np.ndarray, r: np.ndarray) -> PchipInterpolator:
    order = np.argsort(q)
    q, r = q[order], r[order]
    keep = np.concatenate([[True], np.diff(q) > 0])
    return PchipInterpolator(q[keep], r[keep])


def bd_rate(reference: RDCurve, test: RDCurve, metric: str = "psnr") -> float:
    result = bd_rate_report(reference, test, metric)
    for flag in result.flags:
        warnings.warn(f"BD-rate: {flag}", stacklevel=2)
    return result.percent
