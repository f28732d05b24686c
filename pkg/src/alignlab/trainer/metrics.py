"""Evaluation metrics: performance ratio, SSIM and latent agreement."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from alignlab.errors import ConfigError, UsageError


@dataclass(frozen=True)
class MetricSpec:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ConfigError(f"metric {self.name}: range upper bound must exceed lower bound")

    def normalize(self, value: float) -> float:
        if value < self.lo or value > self.hi:
            warnings.warn(f"{self.name}={value} outside [{self.lo}, {self.hi}]; clamped", stacklevel=3)
            value = min(max(value, self.lo), self.hi)
        return (value - self.lo) / (self.hi - self.lo)


# score ranges quoted for the external metric models
FB_SPEC = MetricSpec("FB", 1.0, 5.0)
IR_SPEC = MetricSpec("IR", -2.0, 2.0)


def pr_metric(student: Sequence[float], teacher: Sequence[float], specs: Sequence[MetricSpec]) -> float:
    """Mean over metrics of normalized student / normalized teacher, in percent."""
    if not len(student) == len(teacher) == len(specs):
        raise UsageError("student, teacher and specs must have equal length")
    ratios = []
    for s, t, spec in zip(student, teacher, specs):
        tn = spec.normalize(t)
        if tn == 0:
            warnings.warn(f"teacher {spec.name} normalizes to 0; metric skipped", stacklevel=2)
            continue
        ratios.append(spec.normalize(s) / tn)
    if not ratios:
        raise UsageError("no metric with a non-zero teacher value")
    return 100.0 * sum(ratios) / len(ratios)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float, win: int = 7, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid 7x7 Gaussian windows.

    Leading axes (e.g. latent channels) are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"ssim operands differ in shape: {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < win:
        raise UsageError(f"ssim needs images of at least {win}x{win}, got {a.shape}")
    if not data_range > 0:
        raise UsageError("data_range must be positive")
    w = gaussian_window(win, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    pa = np.lib.stride_tricks.sliding_window_view(a, (win, win), axis=(-2, -1))
    pb = np.lib.stride_tricks.sliding_window_view(b, (win, win), axis=(-2, -1))

    def wmean(x):
        return (x * w).sum(axis=(-2, -1))

    mu_a, mu_b = wmean(pa), wmean(pb)
    var_a = wmean(pa * pa) - mu_a * mu_a
    var_b = wmean(pb * pb) - mu_b * mu_b
    cov = wmean(pa * pb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise cosine similarity of flattened samples; zero vectors give 0."""
    a = a.reshape(a.shape[0], -1).to(torch.float64)
    b = b.reshape(b.shape[0], -1).to(torch.float64)
    num = (a * b).sum(-1)
    den = a.norm(dim=-1) * b.norm(dim=-1)
    return torch.where(den > eps, num / den.clamp(min=eps), torch.zeros_like(num))


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 1.0 - cosine(a, b)


def smoothed(values: Sequence[float], alpha: float = 0.01) -> list[float]:
    """Exponential moving average seeded with the first value."""
    out, ema = [], None
    for v in values:
        ema = v if ema is None else (1 - alpha) * ema + alpha * v
        out.append(ema)
    return out
