"""Frozen seeded encoders and the token streams they consume.

The teacher pair mimics a T5-style sequence encoder (``c``) and a CLIP-style
pooled encoder (``c_p``).  The student mimics a multimodal LLM and returns
the hidden states of every layer, the embedding layer counted as layer 0.
Both are random but frozen; only the mechanism around them is trained.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from alignlab import diffcore as dc
from alignlab.errors import ConfigError, UsageError
from alignlab.layers import Dense, TransformerLayer, freeze, generator, normal, sinusoidal

MODALITIES = ("text", "image", "video", "audio")
PAD_ID = 0
TEMPLATE_KEYS = ("text prompt", "editing prompt", "image prompt", "video prompt", "audio prompt")

_PIECE = re.compile(r"\s*(?:\w+|[^\w\s])", re.UNICODE)


@dataclass
class EncoderConfig:
    vocab_size: int = 512
    width: int = 48  # z, shared by teacher internals and student hidden states
    heads: int = 4
    teacher_layers: int = 2
    clip_layers: int = 2
    student_depth: int = 5  # m = student_depth + 1
    d_c: int = 64
    d_p: int = 32
    max_seq: int = 32
    template_seq: int = 96
    share_embeddings: bool = True
    token_width: int = 48
    image_size: int = 8
    image_channels: int = 3
    patch: int = 4
    video_frames: int = 4
    audio_len: int = 256
    audio_window: int = 32

    @property
    def layers(self) -> int:
        return self.student_depth + 1

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.width % self.heads:
            raise ConfigError(f"encoder width {self.width} not divisible by heads {self.heads}")
        if self.student_depth < 0 or self.teacher_layers < 0 or self.clip_layers < 0:
            raise ConfigError("encoder depths must be non-negative")
        if self.max_seq < 1 or self.template_seq < self.max_seq:
            raise ConfigError("need 1 <= max_seq <= template_seq")
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.audio_len % self.audio_window:
            raise ConfigError("audio_len must be a multiple of audio_window")
        for name in ("d_c", "d_p", "token_width", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


# --------------------------------------------------------------------------
# tokenization and streams

@dataclass
class Token:
    modality: str
    id: int | None = None
    vector: np.ndarray | None = None
    text: str = ""


@dataclass
class TokenStream:
    tokens: list[Token] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def modalities(self) -> set[str]:
        return {t.modality for t in self.tokens}

    @property
    def text(self) -> str:
        return "".join(t.text for t in self.tokens if t.modality == "text")


def token_id(piece: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(piece.encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab_size - 1)


def tokenize(text: str, vocab_size: int) -> list[Token]:
    """Byte-hash tokenizer: words and punctuation hashed into buckets 1..V-1."""
    return [
        Token("text", token_id(piece.strip(), vocab_size), None, piece)
        for piece in _PIECE.findall(text)
    ]


def text_stream(prompt: str, vocab_size: int = 512) -> TokenStream:
    return TokenStream(tokenize(prompt, vocab_size))


# --------------------------------------------------------------------------
# continuous modalities

def _mixing(kind: str, raw: int, width: int, seed: int) -> np.ndarray:
    salt = MODALITIES.index(kind)
    rng = np.random.default_rng([seed, salt, raw, width])
    return rng.standard_normal((raw, width)) / np.sqrt(raw)


def _patchify(img: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = img.shape
    if h % patch or w % patch:
        raise UsageError(f"image {img.shape} not divisible into {patch}x{patch} patches")
    x = img.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(-1, patch * patch * c)


def synth_modality_tokens(kind: str, payload: np.ndarray, seed: int = 0,
                          cfg: EncoderConfig | None = None) -> np.ndarray:
    """Deterministic patch/frame/spectrogram tokens of width ``cfg.token_width``.

    The final mixing is linear without bias, so a zero payload gives zero tokens.
    """
    cfg = cfg or EncoderConfig()
    payload = np.asarray(payload, dtype=np.float64)
    if kind == "image":
        if payload.ndim != 3 or payload.shape[0] > cfg.image_size * 4 or payload.shape[1] > cfg.image_size * 4:
            raise UsageError(f"image payload must be (h, w, c) within config, got {payload.shape}")
        raw = _patchify(payload, cfg.patch)
    elif kind == "video":
        if payload.ndim != 4 or payload.shape[0] > cfg.video_frames:
            raise UsageError(f"video payload must be (frames<={cfg.video_frames}, h, w, c), got {payload.shape}")
        raw = np.concatenate([_patchify(frame, cfg.patch) for frame in payload], axis=0)
    elif kind == "audio":
        if payload.ndim != 1 or payload.shape[0] > cfg.audio_len or payload.shape[0] % cfg.audio_window:
            raise UsageError(f"audio payload must be 1-D, a multiple of {cfg.audio_window}, "
                             f"at most {cfg.audio_len} samples; got {payload.shape}")
        frames = payload.reshape(-1, cfg.audio_window)
        raw = np.abs(np.fft.rfft(frames, axis=-1))
    else:
        raise UsageError(f"unsupported modality kind {kind!r}")
    return raw @ _mixing(kind, raw.shape[1], cfg.token_width, seed)


def synth_payload(kind: str, seed: int, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Seeded stand-in for an image, video clip or audio waveform."""
    cfg = cfg or EncoderConfig()
    rng = np.random.default_rng(seed)
    hw, ch = cfg.image_size, cfg.image_channels
    if kind == "image":
        base = rng.uniform(-1, 1, size=(1, 1, ch))
        return base + 0.25 * rng.standard_normal((hw, hw, ch))
    if kind == "video":
        base = rng.uniform(-1, 1, size=(1, 1, 1, ch))
        drift = np.linspace(0, 1, cfg.video_frames)[:, None, None, None] * rng.uniform(-0.5, 0.5, size=(1, 1, 1, ch))
        return base + drift + 0.25 * rng.standard_normal((cfg.video_frames, hw, hw, ch))
    if kind == "audio":
        t = np.arange(cfg.audio_len) / cfg.audio_len
        freq = rng.integers(2, 40)
        return np.sin(2 * np.pi * freq * t) + 0.1 * rng.standard_normal(cfg.audio_len)
    raise UsageError(f"unsupported modality kind {kind!r}")


# --------------------------------------------------------------------------
# template

def build_template(text_prompt: str = "", editing_prompt: str = "", image=None, video=None,
                   audio=None, seed: int = 0, cfg: EncoderConfig | None = None) -> TokenStream:
    """Serialize the five-slot student template, splicing payload tokens after their slots."""
    cfg = cfg or EncoderConfig()
    payloads = {"image prompt": ("image", image), "video prompt": ("video", video),
                "audio prompt": ("audio", audio)}
    if not text_prompt and not editing_prompt and all(p is None for _, p in payloads.values()):
        raise UsageError("template needs at least one non-empty field")
    values = {"text prompt": text_prompt, "editing prompt": editing_prompt}
    for key, (_, payload) in payloads.items():
        values[key] = "no" if payload is None else "yes"

    tokens: list[Token] = []
    pending = "{"
    for i, key in enumerate(TEMPLATE_KEYS):
        sep = "" if i == 0 else ", "
        pending += f"{sep}{json.dumps(key)}: {json.dumps(values[key], ensure_ascii=False)}"
        if key in payloads and payloads[key][1] is not None:
            kind, payload = payloads[key]
            tokens += tokenize(pending, cfg.vocab_size)
            pending = ""
            vecs = synth_modality_tokens(kind, payload, seed, cfg)
            tokens += [Token(kind, None, v) for v in vecs]
    tokens += tokenize(pending + "}", cfg.vocab_size)
    return TokenStream(tokens)


def parse_template(stream: TokenStream) -> dict[str, str]:
    return json.loads(stream.text)


# --------------------------------------------------------------------------
# batching

@dataclass
class TokenBatch:
    ids: torch.Tensor  # (b, s) long, PAD_ID where unused or continuous
    vectors: torch.Tensor  # (b, s, token_width)
    kinds: torch.Tensor  # (b, s) long index into MODALITIES, -1 on padding
    mask: torch.Tensor  # (b, s) bool, True on real tokens


def collate(streams: Sequence[TokenStream], seq_len: int, cfg: EncoderConfig) -> TokenBatch:
    b = len(streams)
    ids = torch.full((b, seq_len), PAD_ID, dtype=torch.long)
    vectors = torch.zeros(b, seq_len, cfg.token_width, dtype=torch.float64)
    kinds = torch.full((b, seq_len), -1, dtype=torch.long)
    for i, stream in enumerate(streams):
        if len(stream) > seq_len:
            raise UsageError(f"stream of length {len(stream)} exceeds max sequence {seq_len}")
        for j, tok in enumerate(stream.tokens):
            if tok.modality not in MODALITIES:
                raise UsageError(f"unknown modality tag {tok.modality!r}")
            kinds[i, j] = MODALITIES.index(tok.modality)
            if tok.modality == "text":
                ids[i, j] = tok.id
            else:
                vectors[i, j] = torch.as_tensor(tok.vector, dtype=torch.float64)
    return TokenBatch(ids, vectors, kinds, kinds >= 0)


def _as_streams(prompts, vocab_size: int) -> list[TokenStream]:
    return [p if isinstance(p, TokenStream) else text_stream(p, vocab_size) for p in prompts]


# --------------------------------------------------------------------------
# encoders

@dataclass
class TeacherCondition:
    c: torch.Tensor  # (b, s_t, d_c)
    c_p: torch.Tensor  # (b, d_p)
    mask: torch.Tensor  # (b, s_t)


@dataclass
class HiddenStateStack:
    H: torch.Tensor  # (b, m, s, z)
    mask: torch.Tensor  # (b, s)

    @property
    def layers(self) -> int:
        return self.H.shape[1]


def embedding_table(cfg: EncoderConfig, seed: int) -> nn.Parameter:
    table = normal((cfg.vocab_size, cfg.width), 1.0, generator(seed))
    return nn.Parameter(table, requires_grad=False)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of x (b, s, d) over positions where mask (b, s) is True; zero if none."""
    w = mask.to(x.dtype)[..., None]
    return (x * w).sum(dim=1) / w.sum(dim=1).clamp(min=1.0)


class _Stack(nn.Module):
    def __init__(self, cfg: EncoderConfig, depth: int, gen: torch.Generator):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(cfg.width, cfg.heads, gen) for _ in range(depth))

    def forward(self, x, mask, keep_all: bool = False):
        pos = sinusoidal(torch.arange(x.shape[1]), x.shape[-1]).to(x.dtype)
        h = x + pos
        outs = [x]
        for layer in self.layers:
            h = layer(h, mask)
            outs.append(h)
        return outs if keep_all else h


class TeacherEncoder(nn.Module):
    """Sequence encoder (T5 stand-in) plus pooled encoder (CLIP stand-in)."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = generator(seed)
        self.embed = embedding_table(cfg, seed)
        self.seq = _Stack(cfg, cfg.teacher_layers, gen)
        self.seq_out = Dense(cfg.width, cfg.d_c, gen)
        self.pool = _Stack(cfg, cfg.clip_layers, gen)
        self.pool_out = Dense(cfg.width, cfg.d_p, gen)
        freeze(self)

    @torch.no_grad()
    def forward(self, prompts, seq_len: int | None = None) -> TeacherCondition:
        return self.encode(prompts, seq_len)

    @torch.no_grad()
    def encode(self, prompts, seq_len: int | None = None) -> TeacherCondition:
        streams = _as_streams(prompts, self.cfg.vocab_size)
        for s in streams:
            if s.modalities - {"text"}:
                raise UsageError("teacher encoders accept text-only streams")
        batch = collate(streams, seq_len or self.cfg.max_seq, self.cfg)
        dtype = self.embed.dtype
        x = self.embed[batch.ids]
        c = self.seq_out(dc.layer_norm(self.seq(x, batch.mask)))
        pooled = masked_mean(dc.layer_norm(self.pool(x, batch.mask)), batch.mask)
        return TeacherCondition(c.to(dtype), self.pool_out(pooled), batch.mask)


class StudentEncoder(nn.Module):
    """Multimodal LLM stand-in returning every layer's hidden states."""

    def __init__(self, cfg: EncoderConfig, seed: int = 1, teacher: TeacherEncoder | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = generator(seed)
        if cfg.share_embeddings and teacher is not None:
            self.embed = teacher.embed
        else:
            self.embed = embedding_table(cfg, seed)
        self.modality_proj = nn.ModuleDict(
            {kind: Dense(cfg.token_width, cfg.width, gen) for kind in MODALITIES[1:]}
        )
        self.stack = _Stack(cfg, cfg.student_depth, gen)
        freeze(self)

    @property
    def layers(self) -> int:
        return self.cfg.layers

    def embed_tokens(self, batch: TokenBatch) -> torch.Tensor:
        dtype = self.embed.dtype
        x = self.embed[batch.ids]
        for idx, kind in enumerate(MODALITIES[1:], start=1):
            sel = batch.kinds == idx
            if bool(sel.any()):
                proj = self.modality_proj[kind](batch.vectors.to(dtype))
                x = torch.where(sel[..., None], proj, x)
        return x

    @torch.no_grad()
    def forward(self, streams, seq_len: int | None = None) -> HiddenStateStack:
        return self.encode(streams, seq_len)

    @torch.no_grad()
    def encode(self, streams, seq_len: int | None = None) -> HiddenStateStack:
        streams = _as_streams(streams, self.cfg.vocab_size)
        limit = self.cfg.template_seq
        for s in streams:
            if len(s) > limit:
                raise UsageError(f"stream of length {len(s)} exceeds student max sequence {limit}")
        batch = collate(streams, seq_len or max(self.cfg.max_seq, max(len(s) for s in streams)), self.cfg)
        outs = self.stack(self.embed_tokens(batch), batch.mask, keep_all=True)
        return HiddenStateStack(torch.stack(outs, dim=1), batch.mask)


def mllm_encode(encoder: StudentEncoder, stream: TokenStream, seq_len: int | None = None) -> HiddenStateStack:
    return encoder.encode([stream], seq_len or len(stream))


def teacher_encode(encoder: TeacherEncoder, prompts: Sequence, seq_len: int | None = None) -> TeacherCondition:
    return encoder.encode(prompts, seq_len)


class TeacherWiredStudent(nn.Module):
    """Student stand-in that exposes the teacher's own condition as a one-layer stack.

    The single layer is ``[c, c_p]`` concatenated along the width, with
    ``c_p`` broadcast over positions; paired with a slicing AlignNet it
    reproduces the teacher condition.
    """

    def __init__(self, teacher: TeacherEncoder):
        super().__init__()
        self.teacher = teacher
        self.cfg = teacher.cfg

    @property
    def layers(self) -> int:
        return 1

    @property
    def width(self) -> int:
        return self.cfg.d_c + self.cfg.d_p

    @torch.no_grad()
    def encode(self, streams, seq_len: int | None = None) -> HiddenStateStack:
        cond = self.teacher.encode(streams, seq_len)
        pooled = cond.c_p[:, None, :].expand(-1, cond.c.shape[1], -1)
        H = torch.cat([cond.c, pooled], dim=-1)[:, None]
        return HiddenStateStack(H, cond.mask)

    forward = encode
