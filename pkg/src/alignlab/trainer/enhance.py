"""Stage-2 LightControl training and LoRA training on top of a frozen stage-1 bridge."""
from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from alignlab.alignnet import AlignedCondition, AlignNet
from alignlab.encoders import build_template, synth_payload
from alignlab.errors import TrainingError, UsageError
from alignlab.lightcontrol import BACKGROUND, LightControl, make_pairs
from alignlab.mmdit import MMDiT, attach_lora, gaussian, lora_parameters, lora_targets
from alignlab.trainer import checkpoint as ckpt_io
from alignlab.trainer.align import (World, build_alignnet, build_world, load_alignnet,
                                    make_optimizer, set_determinism)
from alignlab.trainer.config import RunConfig
from alignlab.trainer.data import batch_indices, step_seed, synthetic_prompts

STYLE_EDIT = "Style Information Only from Reference Image"


@dataclass
class FlowTask:
    """Rectified-flow regression data: targets x0, optional references, precomputed conditions."""

    targets: torch.Tensor
    cond: AlignedCondition
    refs: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.targets.shape[0]

    def select(self, idx):
        cond = AlignedCondition(self.cond.y[idx], self.cond.y_p[idx], self.cond.mask[idx])
        refs = None if self.refs is None else self.refs[idx]
        return self.targets[idx], cond, refs


@dataclass
class EnhanceResult:
    checkpoint: ckpt_io.Checkpoint
    records: list[dict] = field(default_factory=list)
    baseline_val: float = float("nan")
    initial_val: float = float("nan")
    final_val: float = float("nan")
    checkpoint_hash: str | None = None


def resolve_stage1(cfg: RunConfig, stage1) -> ckpt_io.Checkpoint:
    if isinstance(stage1, ckpt_io.Checkpoint):
        return stage1
    path = stage1 or cfg.stage1_checkpoint
    if not path:
        raise UsageError("a stage-1 checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"stage-1 checkpoint {path} not found")
    return ckpt_io.load(path)


def flow_batch(x0: torch.Tensor, seed: int):
    """(x_t, t, velocity target) for rectified flow with x_t = (1-t) x0 + t noise."""
    noise = gaussian(tuple(x0.shape), seed, x0.dtype)
    g = torch.Generator().manual_seed(seed + 1)
    t = torch.rand(x0.shape[0], generator=g, dtype=x0.dtype)
    tt = t[:, None, None, None]
    return (1 - tt) * x0 + tt * noise, t, noise - x0


def flow_loss(model: MMDiT, x0, cond, seed: int, control=None) -> torch.Tensor:
    x_t, t, target = flow_batch(x0, seed)
    pred, _ = model(x_t, cond, t, control=control)
    return ((pred - target) ** 2).mean()


def _condition(world: World, alignnet: AlignNet, streams, seq_len: int) -> AlignedCondition:
    with torch.no_grad():
        return alignnet(world.student.encode(streams, seq_len))


def _require_mllm(cfg: RunConfig) -> None:
    if cfg.student != "mllm":
        raise UsageError("stage-2 and LoRA training need the multimodal student")


def _train_loop(cfg, params, loss_fn, steps, n, stream, out, label):
    opt = make_optimizer(params, cfg)
    records = []
    logf = open(out / "log.jsonl", "w") if out is not None else None
    try:
        for step in range(steps):
            t0 = time.perf_counter()
            seed = step_seed(cfg.seed, step, stream)
            idx = batch_indices(cfg.seed + stream, step, n, cfg.batch_size)
            loss = loss_fn(idx, seed)
            if not bool(torch.isfinite(loss)):
                raise TrainingError(f"{label}: non-finite loss at step {step} (batch seed {seed})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {"step": step, "loss": loss.item(), "loss_per_block": [], "lr": cfg.lr,
                   "wall_ms": (time.perf_counter() - t0) * 1e3, "seed": seed}
            records.append(rec)
            if logf is not None:
                logf.write(json.dumps(rec) + "\n")
    finally:
        if logf is not None:
            logf.close()
    return records


# --------------------------------------------------------------------------

def lightcontrol_task(world: World, alignnet: AlignNet, cfg: RunConfig, count: int, seed: int) -> FlowTask:
    refs, targets, prompts = make_pairs(count, seed, cfg.mmdit.latent_size, cfg.mmdit.latent_channels)
    cond = _condition(world, alignnet, prompts, cfg.encoder.max_seq)
    return FlowTask(torch.from_numpy(targets), cond, torch.from_numpy(refs))


def _val_loss(model, task: FlowTask, seed: int, net: LightControl | None = None) -> float:
    with torch.no_grad():
        idx = torch.arange(len(task))
        x0, cond, refs = task.select(idx)
        control = None if net is None else net(refs, cond.y_p)
        return float(flow_loss(model, x0, cond, seed, control))


def train_lightcontrol(cfg: RunConfig, stage1=None, out_dir=None, world: World | None = None) -> EnhanceResult:
    cfg.validate()
    set_determinism(cfg.strict)
    stage1 = resolve_stage1(cfg, stage1)
    _require_mllm(cfg)
    world = world or build_world(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())

    alignnet = load_alignnet(cfg, stage1)
    net = LightControl(cfg.lightcontrol, seed=cfg.seed + 101)
    train = lightcontrol_task(world, alignnet, cfg, cfg.n_pairs, cfg.seed)
    val = lightcontrol_task(world, alignnet, cfg, cfg.n_val_pairs, cfg.seed + 1)
    model = world.generator

    baseline = _val_loss(model, val, cfg.eval_seed)
    initial = _val_loss(model, val, cfg.eval_seed, net)

    def loss_fn(idx, seed):
        x0, cond, refs = train.select(idx)
        return flow_loss(model, x0, cond, seed, net(refs, cond.y_p))

    records = _train_loop(cfg, list(net.parameters()), loss_fn, cfg.lightcontrol_steps,
                          len(train), 2, out, "lightcontrol")
    final = _val_loss(model, val, cfg.eval_seed, net)

    arrays = dict(stage1.arrays)
    arrays.update(ckpt_io.module_arrays(net, "lightcontrol"))
    ckpt = ckpt_io.Checkpoint(cfg.checkpoint_dict(), arrays, cfg.lightcontrol_steps,
                              {"seed": cfg.seed, "model_seed": cfg.model_seed,
                               "next_step": cfg.lightcontrol_steps})
    result = EnhanceResult(ckpt, records, baseline, initial, final)
    if out is not None:
        result.checkpoint_hash = ckpt_io.save(ckpt, out / "checkpoint.x2i")
        _write_summary(out, result)
    result.lightcontrol = net
    return result


# --------------------------------------------------------------------------

def style_task(world: World, alignnet: AlignNet, cfg: RunConfig, count: int, seed: int) -> FlowTask:
    """Templated image-conditioned prompts whose target is the reference's colour plane."""
    enc, md = cfg.encoder, cfg.mmdit
    prompts = synthetic_prompts(count, seed + 17)
    streams, targets = [], []
    for i, prompt in enumerate(prompts):
        payload = synth_payload("image", seed=int(step_seed(seed, i, 5) % (2 ** 31)), cfg=enc)
        streams.append(build_template(text_prompt=prompt, editing_prompt=STYLE_EDIT, image=payload,
                                      seed=cfg.model_seed, cfg=enc))
        style = payload.mean(axis=(0, 1))
        plane = np.full(md.latent_shape, BACKGROUND, dtype=np.float32)
        for ch in range(min(len(style), md.latent_channels)):
            plane[ch] = style[ch]
        targets.append(plane)
    cond = _condition(world, alignnet, streams, enc.template_seq)
    return FlowTask(torch.from_numpy(np.stack(targets)), cond)


def train_lora(cfg: RunConfig, stage1=None, out_dir=None, world: World | None = None) -> EnhanceResult:
    cfg.validate()
    set_determinism(cfg.strict)
    _require_mllm(cfg)
    world = world or build_world(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())

    stage1_ckpt = None
    if stage1 is not None or cfg.stage1_checkpoint:
        stage1_ckpt = resolve_stage1(cfg, stage1)
        alignnet = load_alignnet(cfg, stage1_ckpt)
    else:
        alignnet = build_alignnet(cfg)
        for p in alignnet.parameters():
            p.requires_grad_(False)

    model = copy.deepcopy(world.generator)
    targets = cfg.lora.targets or lora_targets(model)
    attach_lora(model, targets, cfg.lora.rank, cfg.lora.scale, seed=cfg.seed + 202)
    factors = lora_parameters(model)

    train = style_task(world, alignnet, cfg, cfg.n_pairs, cfg.seed)
    val = style_task(world, alignnet, cfg, cfg.n_val_pairs, cfg.seed + 1)
    initial = _val_loss(model, val, cfg.eval_seed)
    baseline = _val_loss(world.generator, val, cfg.eval_seed)

    def loss_fn(idx, seed):
        x0, cond, _ = train.select(idx)
        return flow_loss(model, x0, cond, seed)

    records = _train_loop(cfg, list(factors.values()), loss_fn, cfg.lora_steps, len(train), 3,
                          out, "lora")
    final = _val_loss(model, val, cfg.eval_seed)

    arrays = {f"lora.{k}": v.detach().numpy().copy() for k, v in factors.items()}
    if stage1_ckpt is not None:
        arrays.update({k: v for k, v in stage1_ckpt.arrays.items() if k.startswith("alignnet.")})
    ckpt = ckpt_io.Checkpoint(cfg.checkpoint_dict(), arrays, cfg.lora_steps,
                              {"seed": cfg.seed, "model_seed": cfg.model_seed, "next_step": cfg.lora_steps})
    result = EnhanceResult(ckpt, records, baseline, initial, final)
    if out is not None:
        result.checkpoint_hash = ckpt_io.save(ckpt, out / "checkpoint.x2i")
        _write_summary(out, result)
    result.model = model
    return result


def _write_summary(out: Path, result: EnhanceResult) -> None:
    summary = {"baseline_val": result.baseline_val, "initial_val": result.initial_val,
               "final_val": result.final_val, "checkpoint_hash": result.checkpoint_hash,
               "final_loss": result.records[-1]["loss"] if result.records else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    from alignlab.plotting import plot_loss_curve

    plot_loss_curve([r["loss"] for r in result.records], out / "loss.png", title="flow-matching loss")
