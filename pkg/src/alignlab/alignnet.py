"""Trainable bridge from the student's layer stack to the teacher's condition space."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from alignlab import diffcore as dc
from alignlab.encoders import HiddenStateStack, masked_mean
from alignlab.errors import ConfigError
from alignlab.layers import MLP, generator, normal

STRATEGIES = ("A1", "A3_mean", "ADA", "CNN")
PHI_KINDS = ("mlp", "identity")


@dataclass
class AlignNetConfig:
    strategy: str = "CNN"
    layer_subset: list[int] | None = None
    kernel: int = 3
    padding: int | None = None
    phi: str = "mlp"
    mlp_hidden: int = 128
    deep_mapper: bool = False
    deep_layers: int = 2

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding

    def subset(self, m: int) -> list[int]:
        if self.layer_subset is not None:
            return list(self.layer_subset)
        if self.strategy == "A3_mean":
            return sorted({0, m - 2, m - 1} - {-1})
        return list(range(m))

    def validate(self, m: int, z: int, d_c: int, d_p: int) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown AlignNet strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.phi not in PHI_KINDS:
            raise ConfigError(f"unknown projection kind {self.phi!r}")
        if m < 1:
            raise ConfigError("hidden-state stack needs at least one layer")
        subset = self.subset(m)
        if not subset or any(not 0 <= i < m for i in subset):
            raise ConfigError(f"layer_subset {subset} out of range for {m} layers")
        if self.strategy == "CNN":
            if self.kernel < 1 or self.pad < 0:
                raise ConfigError(f"invalid kernel {self.kernel} / padding {self.pad}")
            if 2 * self.pad != self.kernel - 1:
                raise ConfigError(f"CNN fusion must preserve (s, z): need 2p = k - 1, got k={self.kernel}, p={self.pad}")
            if self.kernel > m + 2 * self.pad:
                raise ConfigError(f"kernel {self.kernel} exceeds m + 2p = {m + 2 * self.pad}")
        if self.phi == "identity" and (z < d_c or z < d_p):
            raise ConfigError(f"identity projection needs z >= d_c and z >= d_p, got z={z}")
        if self.phi == "mlp" and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be positive")


@dataclass
class AlignedCondition:
    y: torch.Tensor  # (b, s, d_c)
    y_p: torch.Tensor  # (b, d_p)
    mask: torch.Tensor = field(default=None)


class _ResidualMLP(nn.Module):
    def __init__(self, width: int, gen):
        super().__init__()
        self.mlp = MLP(width, 2 * width, width, gen, zero_out=True)

    def forward(self, x):
        return x + self.mlp(dc.layer_norm(x))


class AlignNet(nn.Module):
    def __init__(self, cfg: AlignNetConfig, m: int, z: int, d_c: int, d_p: int, seed: int = 0):
        super().__init__()
        cfg.validate(m, z, d_c, d_p)
        self.cfg, self.m, self.z, self.d_c, self.d_p = cfg, m, z, d_c, d_p
        gen = generator(seed)
        self.subset = cfg.subset(m)
        if cfg.strategy == "ADA":
            self.layer_logits = nn.Parameter(torch.zeros(len(self.subset)))
        elif cfg.strategy == "CNN":
            k = cfg.kernel
            self.kernel = nn.Parameter(normal((1, m, k, k), 1.0 / (m * k * k) ** 0.5, gen))
        self.mapper = (
            nn.Sequential(*(_ResidualMLP(z, gen) for _ in range(cfg.deep_layers)))
            if cfg.deep_mapper else None
        )
        if cfg.phi == "mlp":
            self.seq_head = MLP(z, cfg.mlp_hidden, d_c, gen, zero_out=True)
            self.pool_head = MLP(z, cfg.mlp_hidden, d_p, gen, zero_out=True)

    def layer_weights(self) -> torch.Tensor | None:
        if self.cfg.strategy != "ADA":
            return None
        return dc.softmax(self.layer_logits, axis=0)

    def fuse(self, H: torch.Tensor) -> torch.Tensor:
        """(b, m, s, z) -> (b, s, z)."""
        if H.shape[1] != self.m:
            raise ConfigError(f"AlignNet built for {self.m} layers, got stack of {H.shape[1]}")
        strategy = self.cfg.strategy
        if strategy == "A1":
            return H[:, self.m - 1]
        if strategy == "A3_mean":
            return H[:, self.subset].mean(dim=1)
        if strategy == "ADA":
            w = self.layer_weights().to(H.dtype)
            return torch.einsum("l,blsz->bsz", w, H[:, self.subset])
        return dc.conv_layers(H, self.kernel.to(H.dtype), self.cfg.kernel, self.cfg.pad)[:, 0]

    def project(self, fused: torch.Tensor, mask: torch.Tensor) -> AlignedCondition:
        if self.mapper is not None:
            fused = self.mapper(fused)
        pooled = masked_mean(fused, mask)
        if self.cfg.phi == "identity":
            return AlignedCondition(fused[..., : self.d_c], pooled[..., self.z - self.d_p:], mask)
        return AlignedCondition(self.seq_head(fused), self.pool_head(pooled), mask)

    def forward(self, stack: HiddenStateStack) -> AlignedCondition:
        return self.project(self.fuse(stack.H), stack.mask)


def init_alignnet(cfg: AlignNetConfig, m: int, z: int, d_c: int, d_p: int, seed: int = 0) -> AlignNet:
    return AlignNet(cfg, m, z, d_c, d_p, seed)


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
