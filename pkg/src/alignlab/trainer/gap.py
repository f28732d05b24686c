"""Modality-gap diagnostic: how far projected student features sit from teacher text features."""
from __future__ import annotations

import torch

from alignlab.alignnet import AlignNet
from alignlab.encoders import build_template, masked_mean, synth_payload, text_stream
from alignlab.errors import UsageError
from alignlab.trainer.align import World
from alignlab.trainer.config import RunConfig
from alignlab.trainer.data import step_seed
from alignlab.trainer.metrics import cosine_distance

MODALITIES = ("text", "image", "video", "audio")


def modality_streams(prompts: list[str], kind: str, cfg: RunConfig):
    """Student inputs for ``kind``: raw text, or the template carrying the prompt plus a payload."""
    if kind == "text":
        return [text_stream(p, cfg.encoder.vocab_size) for p in prompts], cfg.encoder.max_seq
    if kind not in MODALITIES:
        raise UsageError(f"unknown modality {kind!r}; expected one of {MODALITIES}")
    streams = []
    for i, prompt in enumerate(prompts):
        payload = synth_payload(kind, seed=step_seed(cfg.seed, i, 11) % (2 ** 31), cfg=cfg.encoder)
        streams.append(build_template(text_prompt=prompt, seed=cfg.model_seed, cfg=cfg.encoder, **{kind: payload}))
    return streams, cfg.encoder.template_seq


@torch.no_grad()
def feature_distance(world: World, alignnet: AlignNet, prompts: list[str], kind: str, cfg: RunConfig) -> float:
    streams, seq_len = modality_streams(prompts, kind, cfg)
    aligned = alignnet(world.student.encode(streams, seq_len))
    teacher = world.teacher.encode(prompts, cfg.encoder.max_seq)
    ys = masked_mean(aligned.y, aligned.mask)
    yt = masked_mean(teacher.c, teacher.mask)
    return float(cosine_distance(ys, yt).mean())


def modality_gap_report(world: World, initial: AlignNet, trained: AlignNet, prompts: list[str],
                        cfg: RunConfig, modalities=MODALITIES) -> list[dict]:
    """One row per modality: mean cosine distance at initialisation and after training."""
    if len(modalities) < 2:
        raise UsageError("the gap report needs at least two modalities")
    rows = []
    for kind in modalities:
        before = feature_distance(world, initial, prompts, kind, cfg)
        after = feature_distance(world, trained, prompts, kind, cfg)
        rows.append({"modality": kind, "init_distance": before, "trained_distance": after,
                     "change": after - before})
    return rows
