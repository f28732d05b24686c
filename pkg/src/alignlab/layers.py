"""Small seeded building blocks shared by the encoders, generator and bridge."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from alignlab import diffcore as dc

MASK_FILL = -1e9


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float32) * std


class Dense(nn.Module):
    """Affine layer whose weights are drawn from an explicit generator."""

    def __init__(self, d_in: int, d_out: int, gen: torch.Generator | None = None,
                 gain: float = 1.0, zero: bool = False, bias: bool = True):
        super().__init__()
        if zero or gen is None:
            w = torch.zeros(d_out, d_in)
        else:
            w = normal((d_out, d_in), gain / math.sqrt(d_in), gen)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dc.linear(x, self.weight, self.bias)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, gen: torch.Generator | None,
                 zero_out: bool = False, out_gain: float = 1.0):
        super().__init__()
        self.fc1 = Dense(d_in, d_hidden, gen)
        self.fc2 = Dense(d_hidden, d_out, gen, gain=out_gain, zero=zero_out)

    def forward(self, x):
        return self.fc2(dc.silu(self.fc1(x)))


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, s, d = x.shape
    return x.transpose(1, 2).reshape(b, s, h * d)


def attend(q, k, v, heads: int, key_mask: torch.Tensor | None = None,
           return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    ``key_mask`` is (b, s_k) with True on keys that may be attended.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    d0 = qh.shape[-1]
    scores = dc.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(d0)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], MASK_FILL)
    weights = dc.softmax(scores, axis=-1)
    out = merge_heads(dc.matmul(weights, vh))
    if return_weights:
        return out, weights
    return out


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, gen: torch.Generator, out_gain: float = 1.0):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = Dense(width, width, gen)
        self.k = Dense(width, width, gen)
        self.v = Dense(width, width, gen)
        self.o = Dense(width, width, gen, gain=out_gain)

    def forward(self, x, key_mask=None):
        return self.o(attend(self.q(x), self.k(x), self.v(x), self.heads, key_mask))


class TransformerLayer(nn.Module):
    """Pre-norm encoder layer."""

    def __init__(self, width: int, heads: int, gen: torch.Generator, residual_gain: float = 0.5):
        super().__init__()
        self.attn = SelfAttention(width, heads, gen, out_gain=residual_gain)
        self.mlp = MLP(width, 2 * width, width, gen, out_gain=residual_gain)

    def forward(self, x, key_mask=None):
        x = x + self.attn(dc.layer_norm(x), key_mask)
        return x + self.mlp(dc.layer_norm(x))


def sinusoidal(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sin/cos features of ``positions`` (any float tensor) along a new last axis."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb.to(positions.dtype if positions.is_floating_point() else torch.float32)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module
