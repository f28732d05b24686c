"""Stage-1 alignment training: distil the frozen generator's taps into AlignNet."""
from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from alignlab.alignnet import AlignNet, init_alignnet
from alignlab.distill import block_divergences
from alignlab.encoders import HiddenStateStack, StudentEncoder, TeacherEncoder, TeacherWiredStudent
from alignlab.errors import TrainingError, UsageError
from alignlab.mmdit import MMDiT, DistillTapSet, gaussian, sample
from alignlab.trainer import checkpoint as ckpt_io
from alignlab.trainer.config import RunConfig
from alignlab.trainer.data import batch_indices, read_prompts, step_seed, synthetic_prompts
from alignlab.trainer.metrics import cosine, smoothed, ssim

log = logging.getLogger(__name__)


def set_determinism(strict: bool) -> None:
    torch.use_deterministic_algorithms(strict)
    if strict:
        torch.set_num_threads(1)


@dataclass
class World:
    """The frozen parts of an experiment: teacher encoders, student encoder, generator."""

    cfg: RunConfig
    teacher: TeacherEncoder
    student: StudentEncoder | TeacherWiredStudent
    generator: MMDiT

    @property
    def seq_len(self) -> int:
        return self.cfg.encoder.max_seq


def build_world(cfg: RunConfig) -> World:
    teacher = TeacherEncoder(cfg.encoder, seed=cfg.model_seed)
    if cfg.student == "teacher":
        student = TeacherWiredStudent(teacher)
    else:
        student = StudentEncoder(cfg.encoder, seed=cfg.model_seed + 1, teacher=teacher)
    generator = MMDiT(cfg.mmdit, seed=cfg.model_seed + 2)
    return World(cfg, teacher, student, generator)


def build_alignnet(cfg: RunConfig) -> AlignNet:
    enc = cfg.encoder
    return init_alignnet(cfg.alignnet, cfg.student_layers, cfg.student_width, enc.d_c, enc.d_p,
                         seed=cfg.seed)


def corpora(cfg: RunConfig) -> tuple[list[str], list[str]]:
    train = read_prompts(cfg.prompts_path) if cfg.prompts_path else synthetic_prompts(cfg.n_prompts, cfg.seed)
    if cfg.heldout_path:
        held = read_prompts(cfg.heldout_path)
    else:
        held = synthetic_prompts(cfg.n_heldout, cfg.seed + 1_000_003)
    return train, held[: cfg.n_heldout]


# --------------------------------------------------------------------------
# one step, split into the frozen half (teacher side) and the trainable half

@dataclass
class PreparedBatch:
    step: int
    seed: int
    prompts: list[str]
    latent: torch.Tensor
    t: torch.Tensor
    teacher_taps: DistillTapSet
    stack: HiddenStateStack


def noisy_latent(world: World, cfg: RunConfig, noise: torch.Tensor, t: torch.Tensor,
                 teacher_cond) -> torch.Tensor:
    """Latent at time t reached by Euler steps of the teacher from pure noise."""
    if bool((t == 1.0).all()):
        return noise
    x = noise
    dt = (1.0 - t) / cfg.t_euler_steps
    for i in range(cfg.t_euler_steps):
        ti = 1.0 - i * dt
        v, _ = world.generator(x, teacher_cond, ti)
        x = x - dt[:, None, None, None] * v
    return x


def prepare_batch(world: World, cfg: RunConfig, prompts: list[str], step: int) -> PreparedBatch:
    """Everything about step ``step`` that does not depend on trainable parameters."""
    seed = step_seed(cfg.seed, step)
    idx = batch_indices(cfg.seed, step, len(prompts), cfg.batch_size)
    batch = [prompts[i] for i in idx]
    with torch.no_grad():
        noise = gaussian((len(batch), *cfg.mmdit.latent_shape), seed)
        if cfg.t_mode == "fixed":
            t = torch.ones(len(batch))
        else:
            g = torch.Generator().manual_seed(seed + 1)
            t = cfg.t_lo + (1.0 - cfg.t_lo) * torch.rand(len(batch), generator=g)
        tc = world.teacher.encode(batch, world.seq_len)
        latent = noisy_latent(world, cfg, noise, t, tc)
        _, taps = world.generator(latent, tc, t, cfg.tap)
        stack = world.student.encode(batch, world.seq_len)
    return PreparedBatch(step, seed, batch, latent, t, taps, stack)


def sequential_batches(produce: Callable[[int], PreparedBatch], steps: int) -> Iterator[PreparedBatch]:
    for step in range(steps):
        yield produce(step)


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


def overlapped_batches(produce: Callable[[int], PreparedBatch], steps: int) -> Iterator[PreparedBatch]:
    """Double-buffered hand-off: a worker prepares batch i+1 while the caller trains on batch i."""
    slot: queue.Queue = queue.Queue(maxsize=1)
    stop = threading.Event()

    def worker():
        try:
            for step in range(steps):
                item = produce(step)
                while not stop.is_set():
                    try:
                        slot.put(item, timeout=0.05)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # re-raised in the consumer
            slot.put(_Failure(exc))

    thread = threading.Thread(target=worker, name="teacher-prefetch", daemon=True)
    thread.start()
    try:
        for expected in range(steps):
            item = slot.get()
            if isinstance(item, _Failure):
                raise item.exc
            if item.step != expected:
                raise TrainingError(f"hand-off out of order: got step {item.step}, expected {expected}")
            yield item
    finally:
        stop.set()
        thread.join()


# --------------------------------------------------------------------------

@dataclass
class AlignResult:
    alignnet: AlignNet
    checkpoint: ckpt_io.Checkpoint
    records: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint_hash: str | None = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def smoothed_losses(self, alpha: float = 0.01) -> list[float]:
        return smoothed(self.losses, alpha)


def make_optimizer(params, cfg: RunConfig):
    params = list(params)
    if not params:
        return None
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _dump_nan(out_dir, prep: PreparedBatch, loss_value) -> None:
    if out_dir is None:
        return
    path = Path(out_dir) / "nan_dump.json"
    path.write_text(json.dumps({"step": prep.step, "batch_seed": prep.seed, "prompts": prep.prompts,
                                "loss": str(loss_value)}, indent=2))


def train_align(cfg: RunConfig, out_dir=None, world: World | None = None,
                prompts: list[str] | None = None) -> AlignResult:
    cfg.validate()
    set_determinism(cfg.strict)
    world = world or build_world(cfg)
    if prompts is None:
        prompts, _ = corpora(cfg)
    if not prompts:
        raise UsageError("empty prompt corpus")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())

    alignnet = build_alignnet(cfg)
    params = [p for p in alignnet.parameters() if p.requires_grad]
    opt = make_optimizer(params, cfg)

    produce = lambda step: prepare_batch(world, cfg, prompts, step)  # noqa: E731
    batches = (overlapped_batches if cfg.pipeline == "overlapped" else sequential_batches)(produce, cfg.steps)

    records = []
    logf = open(out / "log.jsonl", "w") if out is not None else None
    t_start = time.perf_counter()
    try:
        for prep in batches:
            t0 = time.perf_counter()
            cond = alignnet(prep.stack)
            _, taps = world.generator(prep.latent, cond, prep.t, cfg.tap)
            per_block = block_divergences(taps, prep.teacher_taps, cfg.loss.kind, cfg.loss.tau)
            loss = torch.stack(per_block).mean()
            if not bool(torch.isfinite(loss)):
                _dump_nan(out, prep, loss.item())
                raise TrainingError(f"non-finite loss at step {prep.step} (batch seed {prep.seed})")
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            rec = {"step": prep.step, "loss": loss.item(),
                   "loss_per_block": [v.item() for v in per_block], "lr": cfg.lr,
                   "wall_ms": (time.perf_counter() - t0) * 1e3, "seed": prep.seed}
            records.append(rec)
            if logf is not None:
                logf.write(json.dumps(rec) + "\n")
            if prep.step % 250 == 0:
                log.info("step %d loss %.6f", prep.step, rec["loss"])
    finally:
        if logf is not None:
            logf.close()
    wall = time.perf_counter() - t_start

    ckpt = ckpt_io.Checkpoint(
        config=cfg.checkpoint_dict(),
        arrays=ckpt_io.module_arrays(alignnet, "alignnet"),
        step=cfg.steps,
        seed_state={"seed": cfg.seed, "model_seed": cfg.model_seed, "next_step": cfg.steps},
    )
    result = AlignResult(alignnet, ckpt, records, wall)
    if out is not None:
        result.checkpoint_hash = ckpt_io.save(ckpt, out / "checkpoint.x2i")
        from alignlab.plotting import plot_loss_curve

        plot_loss_curve(result.losses, out / "loss.png", alpha=cfg.ema_alpha)
    return result


def load_alignnet(cfg: RunConfig, ckpt: ckpt_io.Checkpoint) -> AlignNet:
    net = build_alignnet(cfg)
    ckpt_io.load_module_arrays(net, ckpt.group("alignnet"))
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@torch.no_grad()
def evaluate_alignment(world: World, alignnet: AlignNet, prompts: list[str],
                       cfg: RunConfig | None = None) -> dict:
    """Held-out agreement between teacher-conditioned and student-conditioned samples."""
    cfg = cfg or world.cfg
    tc = world.teacher.encode(prompts, world.seq_len)
    sc = alignnet(world.student.encode(prompts, world.seq_len))
    noise = gaussian((len(prompts), *cfg.mmdit.latent_shape), cfg.eval_seed)
    xt = sample(world.generator, tc, cfg.sample_steps, noise=noise)
    xs = sample(world.generator, sc, cfg.sample_steps, noise=noise)
    ssims = []
    for a, b in zip(xt.numpy(), xs.numpy()):
        rng = float(a.max() - a.min())
        ssims.append(ssim(a, b, data_range=rng if rng > 0 else 1.0))
    return {
        "latent_cosine": float(cosine(xt, xs).mean()),
        "teacher_mse": float(((xt.double() - xs.double()) ** 2).mean()),
        "ssim": float(np.mean(ssims)),
        "displacement_cosine": float(cosine(noise - xt, noise - xs).mean()),
    }
