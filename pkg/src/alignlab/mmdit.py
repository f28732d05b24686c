"""Frozen double-stream diffusion transformer with distillation taps.

Each double-stream block follows the adaptive-norm recipe

    x_hat       = LN(x) * (1 + gamma1) + beta1
    x_A, c_A    = joint attention over concat(x_hat, c_hat), split back
    x_LN        = LN(x + alpha1 * x_A)
    x_FF        = FF(x_LN * (1 + gamma2) + beta2)
    x_O         = (x + alpha1 * x_A) + x_FF * alpha2

mirrored on the condition side with its own modulation and FF.  The six
modulation vectors per side are regressed from SiLU(embed(t) + proj(c_p)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from alignlab import diffcore as dc
from alignlab.errors import ConfigError, DimensionError
from alignlab.layers import MLP, Dense, attend, freeze, generator, sinusoidal

TAP_POSITIONS = ("attn", "ln", "ff", "block", "oneside")


@dataclass
class MMDiTConfig:
    hidden: int = 64
    heads: int = 4
    blocks: int = 4
    single_blocks: int = 0
    latent_channels: int = 4
    latent_size: int = 8
    patch: int = 2
    d_c: int = 64
    d_p: int = 32
    mlp_ratio: int = 2
    time_freq: int = 64
    modulation_gain: float = 1.0
    final_gain: float = 1.0
    zero_modulation: bool = False
    inject_single: bool = False

    @property
    def tokens(self) -> int:
        return (self.latent_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.latent_size % self.patch:
            raise ConfigError(f"latent size {self.latent_size} not divisible by patch {self.patch}")
        if self.blocks < 1 or self.single_blocks < 0:
            raise ConfigError("need at least one double-stream block")
        for name in ("d_c", "d_p", "time_freq", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class ModulationOutput:
    x_hat: torch.Tensor
    alpha1: torch.Tensor
    beta2: torch.Tensor
    gamma2: torch.Tensor
    alpha2: torch.Tensor


@dataclass
class TapEntry:
    x: torch.Tensor | None
    c: torch.Tensor | None


@dataclass
class DistillTapSet:
    position: str
    entries: list[TapEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def check_position(position: str | None) -> None:
    if position is not None and position not in TAP_POSITIONS:
        raise ConfigError(f"unknown tap position {position!r}; expected one of {TAP_POSITIONS}")


def condition_tensors(cond) -> tuple[torch.Tensor, torch.Tensor]:
    """Sequence and pooled tensors of a teacher or aligned condition."""
    if hasattr(cond, "c"):
        return cond.c, cond.c_p
    return cond.y, cond.y_p


# --------------------------------------------------------------------------
# patchify

def patchify(latent: torch.Tensor, patch: int) -> torch.Tensor:
    b, ch, h, w = latent.shape
    x = latent.reshape(b, ch, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // patch) * (w // patch), patch * patch * ch)


def unpatchify(tokens: torch.Tensor, patch: int, channels: int, size: int) -> torch.Tensor:
    b = tokens.shape[0]
    g = size // patch
    x = tokens.reshape(b, g, g, patch, patch, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, size, size)


# --------------------------------------------------------------------------
# components

class TimestepEmbed(nn.Module):
    def __init__(self, freq: int, hidden: int, gen):
        super().__init__()
        self.freq = freq
        self.mlp = MLP(freq, hidden, hidden, gen)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal(t * 1000.0, self.freq).to(self.mlp.fc1.weight.dtype))


def timestep_embed(embedder: TimestepEmbed, t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=embedder.mlp.fc1.weight.dtype)
    return embedder(t.reshape(-1)).squeeze(0) if t.dim() == 0 else embedder(t)


class Modulation(nn.Module):
    """Regresses per-token-broadcast scale/shift/gate vectors from the conditioning vector."""

    def __init__(self, hidden: int, count: int, gen, gain: float = 1.0, zero: bool = False):
        super().__init__()
        self.count = count
        self.lin = Dense(hidden, count * hidden, gen, gain=gain, zero=zero)

    def forward(self, vec: torch.Tensor) -> list[torch.Tensor]:
        out = self.lin(dc.silu(vec))[:, None, :]
        return list(out.chunk(self.count, dim=-1))


def adaln_modulate(x: torch.Tensor, vec: torch.Tensor, modulation: Modulation) -> ModulationOutput:
    gamma1, beta1, alpha1, gamma2, beta2, alpha2 = modulation(vec)
    x_hat = dc.layer_norm(x) * (1 + gamma1) + beta1
    return ModulationOutput(x_hat, alpha1, beta2, gamma2, alpha2)


class JointAttention(nn.Module):
    """Shared Q/K/V/O projections applied to the concatenated streams."""

    def __init__(self, hidden: int, heads: int, gen):
        super().__init__()
        self.heads = heads
        self.q = Dense(hidden, hidden, gen)
        self.k = Dense(hidden, hidden, gen)
        self.v = Dense(hidden, hidden, gen)
        self.o = Dense(hidden, hidden, gen)

    @property
    def head_dim(self) -> int:
        return self.q.d_out // self.heads

    def forward(self, joint: torch.Tensor, return_weights: bool = False):
        out = attend(self.q(joint), self.k(joint), self.v(joint), self.heads,
                     return_weights=return_weights)
        if return_weights:
            out, weights = out
            return self.o(out), weights
        return self.o(out)


def joint_attention(x_hat: torch.Tensor, c_hat: torch.Tensor, attn: JointAttention):
    n_x = x_hat.shape[1]
    out = attn(torch.cat([x_hat, c_hat], dim=1))
    return out[:, :n_x], out[:, n_x:]


class DoubleStreamBlock(nn.Module):
    def __init__(self, cfg: MMDiTConfig, gen):
        super().__init__()
        h = cfg.hidden
        self.x_mod = Modulation(h, 6, gen, cfg.modulation_gain, cfg.zero_modulation)
        self.c_mod = Modulation(h, 6, gen, cfg.modulation_gain, cfg.zero_modulation)
        self.attn = JointAttention(h, cfg.heads, gen)
        self.x_ff = MLP(h, cfg.mlp_ratio * h, h, gen)
        self.c_ff = MLP(h, cfg.mlp_ratio * h, h, gen)

    @staticmethod
    def _tail(stream, stream_a, mod: ModulationOutput, ff: MLP):
        resid = stream + mod.alpha1 * stream_a
        s_ln = dc.layer_norm(resid)
        s_ff = ff(s_ln * (1 + mod.gamma2) + mod.beta2)
        return s_ln, s_ff, resid + s_ff * mod.alpha2

    def forward(self, x, c, vec, tap: str | None = None):
        check_position(tap)
        xm = adaln_modulate(x, vec, self.x_mod)
        cm = adaln_modulate(c, vec, self.c_mod)
        x_a, c_a = joint_attention(xm.x_hat, cm.x_hat, self.attn)
        x_ln, x_ff, x_o = self._tail(x, x_a, xm, self.x_ff)
        c_ln, c_ff, c_o = self._tail(c, c_a, cm, self.c_ff)
        entry = None
        if tap == "attn":
            entry = TapEntry(x_a, c_a)
        elif tap == "ln":
            entry = TapEntry(x_ln, c_ln)
        elif tap == "ff":
            entry = TapEntry(x_ff, c_ff)
        elif tap == "block":
            entry = TapEntry(x_o, c_o)
        elif tap == "oneside":
            entry = TapEntry(None, c_a)
        return x_o, c_o, entry


class SingleStreamBlock(nn.Module):
    """Parallel attention + MLP over the concatenated sequence."""

    def __init__(self, cfg: MMDiTConfig, gen):
        super().__init__()
        h = cfg.hidden
        self.mod = Modulation(h, 3, gen, cfg.modulation_gain, cfg.zero_modulation)
        self.attn = JointAttention(h, cfg.heads, gen)
        self.mlp = MLP(h, cfg.mlp_ratio * h, h, gen)

    def forward(self, joint, vec, n_x: int, tap: str | None = None):
        check_position(tap)
        gamma, beta, alpha = self.mod(vec)
        j_hat = dc.layer_norm(joint) * (1 + gamma) + beta
        a = self.attn(j_hat)
        f = self.mlp(j_hat)
        out = joint + alpha * (a + f)
        entry = None
        if tap == "attn":
            entry = TapEntry(a, None)
        elif tap == "ln":
            entry = TapEntry(j_hat, None)
        elif tap == "ff":
            entry = TapEntry(f, None)
        elif tap == "block":
            entry = TapEntry(out, None)
        elif tap == "oneside":
            entry = TapEntry(None, a[:, n_x:])
        return out, entry


class MMDiT(nn.Module):
    def __init__(self, cfg: MMDiTConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = generator(seed)
        h = cfg.hidden
        self.x_embed = Dense(cfg.patch_dim, h, gen)
        self.c_embed = Dense(cfg.d_c, h, gen)
        self.t_embed = TimestepEmbed(cfg.time_freq, h, gen)
        self.p_embed = MLP(cfg.d_p, h, h, gen)
        self.double_blocks = nn.ModuleList(DoubleStreamBlock(cfg, gen) for _ in range(cfg.blocks))
        self.single_blocks = nn.ModuleList(SingleStreamBlock(cfg, gen) for _ in range(cfg.single_blocks))
        self.final_mod = Modulation(h, 2, gen, cfg.modulation_gain, cfg.zero_modulation)
        self.final = Dense(h, cfg.patch_dim, gen, gain=cfg.final_gain)
        freeze(self)

    @property
    def injection_points(self) -> int:
        return self.cfg.blocks + (self.cfg.single_blocks if self.cfg.inject_single else 0)

    def conditioning_vector(self, t, pooled: torch.Tensor) -> torch.Tensor:
        b = pooled.shape[0]
        t = torch.as_tensor(t, dtype=pooled.dtype)
        if t.dim() == 0:
            t = t.expand(b)
        return self.t_embed(t) + self.p_embed(pooled)

    def forward(self, latent: torch.Tensor, cond, t, tap: str | None = None,
                control: Sequence[torch.Tensor] | None = None):
        """Velocity prediction and (if ``tap``) the per-block tap set."""
        check_position(tap)
        cfg = self.cfg
        seq, pooled = condition_tensors(cond)
        if seq.shape[-1] != cfg.d_c or pooled.shape[-1] != cfg.d_p:
            raise DimensionError(
                f"condition dims ({seq.shape[-1]}, {pooled.shape[-1]}) do not match "
                f"generator ({cfg.d_c}, {cfg.d_p})"
            )
        if control is not None and len(control) != self.injection_points:
            raise ConfigError(f"expected {self.injection_points} control features, got {len(control)}")
        vec = self.conditioning_vector(t, pooled)
        x = self.x_embed(patchify(latent, cfg.patch))
        c = self.c_embed(seq)
        taps = DistillTapSet(tap) if tap else None
        for i, block in enumerate(self.double_blocks):
            x, c, entry = block(x, c, vec, tap)
            if control is not None:
                x = x + control[i]
            if taps is not None:
                taps.entries.append(entry)
        n_x = x.shape[1]
        if len(self.single_blocks):
            joint = torch.cat([x, c], dim=1)
            for j, block in enumerate(self.single_blocks):
                joint, entry = block(joint, vec, n_x, tap)
                if control is not None and cfg.inject_single:
                    joint = torch.cat([joint[:, :n_x] + control[cfg.blocks + j], joint[:, n_x:]], dim=1)
                if taps is not None:
                    taps.entries.append(entry)
            x = joint[:, :n_x]
        shift, scale = self.final_mod(vec)
        out = self.final(dc.layer_norm(x) * (1 + scale) + shift)
        velocity = unpatchify(out, cfg.patch, cfg.latent_channels, cfg.latent_size)
        return velocity, taps


def model_forward(model: MMDiT, latent, cond, t, tap: str | None = None, control=None):
    return model(latent, cond, t, tap, control)


# --------------------------------------------------------------------------
# LoRA

class LoRADense(nn.Module):
    """``W + scale * B @ A`` with B zero-initialised."""

    def __init__(self, base: Dense, rank: int, scale: float, gen):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scale = scale
        self.A = nn.Parameter(torch.randn(rank, base.d_in, generator=gen).to(base.weight.dtype) / math.sqrt(base.d_in))
        self.B = nn.Parameter(torch.zeros(base.d_out, rank, dtype=base.weight.dtype))

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    def dense_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.B @ self.A)

    def forward(self, x):
        return self.base(x) + self.scale * dc.linear(dc.linear(x, self.A), self.B)


def lora_targets(model: MMDiT, which: Sequence[str] = ("q", "k", "v", "o")) -> list[str]:
    return [f"double_blocks.{i}.attn.{name}" for i in range(len(model.double_blocks)) for name in which]


def attach_lora(model: MMDiT, targets: Sequence[str], rank: int, scale: float = 1.0,
                seed: int = 0) -> MMDiT:
    """Wrap each named Dense in ``model`` with a LoRA adapter, in place."""
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    gen = generator(seed)
    for name in targets:
        try:
            module = model.get_submodule(name)
        except AttributeError as exc:
            raise ConfigError(f"unknown LoRA target {name!r}") from exc
        if not isinstance(module, Dense):
            raise ConfigError(f"LoRA target {name!r} is not a dense projection")
        if rank > min(module.d_in, module.d_out):
            raise ConfigError(f"rank {rank} exceeds target extent {tuple(module.weight.shape)}")
        parent_name, _, attr = name.rpartition(".")
        setattr(model.get_submodule(parent_name), attr, LoRADense(module, rank, scale, gen))
    return model


def lora_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    return {
        f"{name}.{p}": getattr(mod, p)
        for name, mod in model.named_modules() if isinstance(mod, LoRADense)
        for p in ("A", "B")
    }


# --------------------------------------------------------------------------
# sampling

def gaussian(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(*shape, generator=generator(seed), dtype=dtype)


@torch.no_grad()
def sample(model: MMDiT, cond, steps: int = 1, seed: int = 0, noise: torch.Tensor | None = None,
           control=None) -> torch.Tensor:
    """Euler integration of the rectified-flow ODE from t=1 (noise) to t=0."""
    if steps < 1:
        raise ConfigError("sampler needs at least one step")
    seq, _ = condition_tensors(cond)
    if noise is None:
        noise = gaussian((seq.shape[0], *model.cfg.latent_shape), seed, seq.dtype)
    x = noise
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        v, _ = model(x, cond, t, control=control)
        x = x - dt * v
    return x
