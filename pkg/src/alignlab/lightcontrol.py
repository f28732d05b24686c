"""Parallel ResNet path whose per-block features are added to the generator's image stream."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from alignlab import diffcore as dc
from alignlab.errors import ConfigError
from alignlab.layers import Dense, generator, normal
from alignlab.mmdit import patchify


@dataclass
class LightControlConfig:
    channels: int = 32
    blocks: int = 4
    ref_channels: int = 4
    ref_size: int = 8
    patch: int = 2
    hidden: int = 64
    d_p: int = 32

    def validate(self) -> None:
        if self.blocks < 1 or self.channels < 1:
            raise ConfigError("LightControl needs at least one block and one channel")
        if self.ref_size % self.patch:
            raise ConfigError(f"reference size {self.ref_size} not divisible by patch {self.patch}")


class Conv3x3(nn.Module):
    def __init__(self, c_in: int, c_out: int, gen, gain: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(normal((c_out, c_in, 3, 3), gain / math.sqrt(9 * c_in), gen))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, padding=1)


class ResBlock(nn.Module):
    """conv - channel norm - SiLU - conv, plus identity."""

    def __init__(self, channels: int, gen):
        super().__init__()
        self.conv1 = Conv3x3(channels, channels, gen)
        self.conv2 = Conv3x3(channels, channels, gen, gain=0.5)

    def forward(self, h):
        r = dc.silu(dc.layer_norm(self.conv1(h), axis=1))
        return h + self.conv2(r)


class LightControl(nn.Module):
    def __init__(self, cfg: LightControlConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = generator(seed)
        self.stem = Conv3x3(cfg.ref_channels, cfg.channels, gen)
        self.cond = Dense(cfg.d_p, cfg.channels, gen)
        self.blocks = nn.ModuleList(ResBlock(cfg.channels, gen) for _ in range(cfg.blocks))
        self.outs = nn.ModuleList(
            Dense(cfg.channels * cfg.patch ** 2, cfg.hidden, zero=True) for _ in range(cfg.blocks)
        )

    def forward(self, c_i: torch.Tensor, c_p: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.cfg
        if c_i.dim() != 4 or tuple(c_i.shape[1:]) != (cfg.ref_channels, cfg.ref_size, cfg.ref_size):
            raise ConfigError(
                f"reference must be (b, {cfg.ref_channels}, {cfg.ref_size}, {cfg.ref_size}), got {tuple(c_i.shape)}"
            )
        if c_p.shape != (c_i.shape[0], cfg.d_p):
            raise ConfigError(f"pooled condition must be (b, {cfg.d_p}), got {tuple(c_p.shape)}")
        h = self.stem(c_i) + self.cond(c_p)[:, :, None, None]
        feats = []
        for block, out in zip(self.blocks, self.outs):
            h = block(h)
            feats.append(out(patchify(h, cfg.patch)))
        return feats


def lightcontrol_forward(net: LightControl, c_i: torch.Tensor, c_p: torch.Tensor) -> list[torch.Tensor]:
    return net(c_i, c_p)


def inject(x_o: torch.Tensor, y_c: torch.Tensor) -> torch.Tensor:
    return x_o + y_c


# --------------------------------------------------------------------------
# synthetic edge-map -> filled-shape pairs

SHAPES = ("square", "disc", "triangle")
COLORS = {
    "red": (1.0, -0.5, -0.5, 0.5),
    "green": (-0.5, 1.0, -0.5, 0.5),
    "blue": (-0.5, -0.5, 1.0, 0.5),
    "yellow": (1.0, 1.0, -0.5, -0.5),
}
BACKGROUND = -0.5


def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2 + 0.5)


def _edges(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def make_pairs(count: int, seed: int, size: int = 8, channels: int = 4):
    """(references, targets, prompts): edge maps and filled shapes in latent layout."""
    rng = np.random.default_rng(seed)
    refs = np.zeros((count, channels, size, size), dtype=np.float32)
    targets = np.full((count, channels, size, size), BACKGROUND, dtype=np.float32)
    prompts = []
    names = list(COLORS)
    for i in range(count):
        kind = SHAPES[rng.integers(len(SHAPES))]
        color = names[rng.integers(len(names))]
        r = rng.uniform(1.5, size / 3)
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(kind, cy, cx, r, size)
        vec = np.asarray(COLORS[color], dtype=np.float32)[:channels, None, None]
        refs[i] = _edges(mask)[None] * vec
        targets[i] = np.where(mask[None], vec, BACKGROUND)
        prompts.append(f"a {color} {kind} filled")
    return refs, targets, prompts


def dump_pairs(directory, refs: np.ndarray, targets: np.ndarray, prompts) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    refs.astype("<f4").tofile(directory / "refs.f32")
    targets.astype("<f4").tofile(directory / "targets.f32")
    sidecar = {
        "count": int(refs.shape[0]),
        "dtype": "<f4",
        "refs": {"file": "refs.f32", "shape": list(refs.shape)},
        "targets": {"file": "targets.f32", "shape": list(targets.shape)},
        "prompts": list(prompts),
    }
    path = directory / "pairs.json"
    path.write_text(json.dumps(sidecar, indent=2))
    return path


def load_pairs(directory):
    directory = Path(directory)
    meta = json.loads((directory / "pairs.json").read_text())
    out = []
    for key in ("refs", "targets"):
        spec = meta[key]
        arr = np.fromfile(directory / spec["file"], dtype=meta["dtype"])
        out.append(arr.reshape(spec["shape"]))
    return out[0], out[1], meta["prompts"]
