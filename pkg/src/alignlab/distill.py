"""Per-layer divergences between student and teacher tap sets."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from alignlab import diffcore as dc
from alignlab.errors import ConfigError, UsageError
from alignlab.mmdit import DistillTapSet

KINDS = ("mse", "kl", "rkl", "js")
PROB_FLOOR = 1e-8


@dataclass
class DivergenceKind:
    kind: str = "rkl"
    tau: float = 1.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown divergence {self.kind!r}; expected one of {KINDS}")
        if not (self.tau > 0 and self.tau < float("inf")):
            raise ConfigError(f"temperature must be finite and positive, got {self.tau}")


def normalize_attn(A: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Per-token distribution over feature channels."""
    if not tau > 0:
        raise ConfigError("temperature must be positive")
    return dc.softmax(A / tau, axis=-1)


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # sum over channels; logs floored at PROB_FLOOR
    return (p * (torch.log(p.clamp(min=PROB_FLOOR)) - torch.log(q.clamp(min=PROB_FLOOR)))).sum(dim=-1)


def divergence(p: torch.Tensor, q: torch.Tensor, kind: str) -> torch.Tensor:
    """Scalar divergence between teacher ``p`` and student ``q``.

    For the probabilistic kinds ``p`` and ``q`` are distributions over the
    last axis and the per-token value is averaged over all leading axes.
    ``rkl`` is KL(q || p).  ``mse`` compares raw features.
    """
    if p.shape != q.shape:
        raise UsageError(f"divergence operands differ in shape: {tuple(p.shape)} vs {tuple(q.shape)}")
    if kind == "mse":
        d = p - q
        return (d * d).mean()
    if kind == "kl":
        return _kl(p, q).mean()
    if kind == "rkl":
        return _kl(q, p).mean()
    if kind == "js":
        m = 0.5 * (p + q)
        return (0.5 * _kl(p, m) + 0.5 * _kl(q, m)).mean()
    raise ConfigError(f"unknown divergence {kind!r}")


def feature_divergence(teacher: torch.Tensor, student: torch.Tensor, kind: str, tau: float = 1.0) -> torch.Tensor:
    """Divergence between two tap features, reduced in float64.

    Near-identical float32 distributions lose the KL sum to cancellation, so
    both sides are promoted before normalizing.
    """
    teacher, student = teacher.to(torch.float64), student.to(torch.float64)
    if kind == "mse":
        return divergence(teacher, student, "mse")
    return divergence(normalize_attn(teacher, tau), normalize_attn(student, tau), kind)


def block_divergences(student: DistillTapSet, teacher: DistillTapSet, kind: str = "rkl",
                      tau: float = 1.0) -> list[torch.Tensor]:
    if student.position != teacher.position:
        raise UsageError(f"tap positions differ: {student.position} vs {teacher.position}")
    if len(student) != len(teacher):
        raise UsageError(f"tap sets differ in block count: {len(student)} vs {len(teacher)}")
    values = []
    for s, t in zip(student.entries, teacher.entries):
        sides = []
        for s_side, t_side in ((s.x, t.x), (s.c, t.c)):
            if (s_side is None) != (t_side is None):
                raise UsageError("student and teacher taps expose different sides")
            if s_side is not None:
                sides.append(feature_divergence(t_side, s_side, kind, tau))
        values.append(torch.stack(sides).mean())
    return values


def layer_distill_loss(student: DistillTapSet, teacher: DistillTapSet, kind: str = "rkl",
                       tau: float = 1.0) -> torch.Tensor:
    """Unweighted mean over blocks of the per-block divergence (x and c sides averaged)."""
    return torch.stack(block_divergences(student, teacher, kind, tau)).mean()
