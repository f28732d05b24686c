"""Command-line entry point: ``alignlab <verb> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from alignlab.errors import AlignLabError, ConfigError, UsageError
from alignlab.mmdit import TAP_POSITIONS

VERBS = ("train-align", "train-lightcontrol", "train-lora", "ablate", "eval", "sample", "gap-report",
         "selftest")
LOSSES = ("mse", "kl", "rkl", "js")
AXES = ("alignnet", "position", "loss")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="alignlab", description="Align a multimodal encoder to a frozen MM-DiT generator.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON RunConfig; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory; nothing is written outside it")
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--steps", type=int, help="steps for the verb's own training stage")
    p.add_argument("--strict", action="store_true", help="single-threaded bitwise-deterministic mode")
    p.add_argument("--tap", choices=TAP_POSITIONS)
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--stage1", help="stage-1 checkpoint (train-lightcontrol, train-lora)")
    p.add_argument("--checkpoint", help="checkpoint to evaluate or sample from")
    p.add_argument("--prompt", action="append", help="prompt for sample (repeatable)")
    return p


def resolve_config(args):
    from alignlab.trainer.config import RunConfig

    if args.config:
        cfg = RunConfig.load(args.config)
    elif args.checkpoint:
        cfg = RunConfig.from_dict(_checkpoint(args.checkpoint).config)
    else:
        cfg = RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.strict:
        changes["strict"] = True
    if args.tap:
        changes["tap"] = args.tap
    if args.loss:
        changes["loss__kind"] = args.loss
    if args.stage1:
        changes["stage1_checkpoint"] = args.stage1
    if args.steps is not None:
        key = {"train-lightcontrol": "lightcontrol_steps", "train-lora": "lora_steps"}.get(args.verb, "steps")
        changes[key] = args.steps
    return cfg.replace(**changes) if changes else cfg


def _checkpoint(path):
    from alignlab.trainer import checkpoint as ckpt_io

    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return ckpt_io.load(path)


def _out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.verb} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _trained_alignnet(cfg, args):
    from alignlab.trainer.align import load_alignnet

    if not args.checkpoint:
        raise UsageError(f"{args.verb} needs --checkpoint")
    return load_alignnet(cfg, _checkpoint(args.checkpoint))


def cmd_train_align(cfg, args):
    from alignlab.trainer.align import build_world, corpora, evaluate_alignment, train_align

    out = _out(args)
    world = build_world(cfg)
    result = train_align(cfg, out_dir=out, world=world)
    scores = evaluate_alignment(world, result.alignnet, corpora(cfg)[1], cfg)
    (out / "eval.json").write_text(json.dumps(scores, indent=2, sort_keys=True))
    smooth = result.smoothed_losses(cfg.ema_alpha)
    _emit({"verb": args.verb, "checkpoint": str(out / "checkpoint.x2i"), "hash": result.checkpoint_hash,
           "initial_loss": result.losses[0], "smoothed_final_loss": smooth[-1], **scores})


def cmd_train_lightcontrol(cfg, args):
    from alignlab.trainer.enhance import train_lightcontrol

    out = _out(args)
    result = train_lightcontrol(cfg, out_dir=out)
    _emit({"verb": args.verb, "checkpoint": str(out / "checkpoint.x2i"), "hash": result.checkpoint_hash,
           "baseline_val": result.baseline_val, "final_val": result.final_val})


def cmd_train_lora(cfg, args):
    from alignlab.trainer.enhance import train_lora

    out = _out(args)
    result = train_lora(cfg, out_dir=out)
    _emit({"verb": args.verb, "checkpoint": str(out / "checkpoint.x2i"), "hash": result.checkpoint_hash,
           "initial_val": result.initial_val, "final_val": result.final_val})


def cmd_ablate(cfg, args):
    from alignlab.trainer.ablate import ablate

    if not args.axis:
        raise UsageError("ablate needs --axis")
    out = _out(args)
    (out / "config.json").write_text(cfg.to_json())
    report = ablate(cfg, args.axis, out_dir=out)
    sys.stdout.write((out / "report.txt").read_text())
    _emit({"verb": args.verb, "axis": args.axis, "report": str(out / "report.json"),
           "variants": [r["variant"] for r in report["rows"]]})


def cmd_eval(cfg, args):
    from alignlab.trainer.align import build_world, corpora, evaluate_alignment

    out = _out(args)
    (out / "config.json").write_text(cfg.to_json())
    alignnet = _trained_alignnet(cfg, args)
    scores = evaluate_alignment(build_world(cfg), alignnet, corpora(cfg)[1], cfg)
    (out / "eval.json").write_text(json.dumps(scores, indent=2, sort_keys=True))
    _emit({"verb": args.verb, **scores})


def cmd_sample(cfg, args):
    from alignlab.mmdit import gaussian, sample
    from alignlab.plotting import plot_latents
    from alignlab.trainer.align import build_world

    out = _out(args)
    (out / "config.json").write_text(cfg.to_json())
    prompts = args.prompt or ["a red cube on a blue sphere"]
    world = build_world(cfg)
    noise = gaussian((len(prompts), *cfg.mmdit.latent_shape), cfg.eval_seed)
    teacher = sample(world.generator, world.teacher.encode(prompts, world.seq_len), cfg.sample_steps, noise=noise)
    rows, titles = [teacher.numpy()], [f"teacher: {p}" for p in prompts]
    if args.checkpoint:
        alignnet = _trained_alignnet(cfg, args)
        cond = alignnet(world.student.encode(prompts, world.seq_len))
        student = sample(world.generator, cond, cfg.sample_steps, noise=noise)
        rows.append(student.numpy())
        titles += [f"student: {p}" for p in prompts]
    latents = np.concatenate(rows)
    np.save(out / "samples.npy", latents)
    plot_latents(latents, out / "samples.png", titles)
    _emit({"verb": args.verb, "samples": str(out / "samples.npy"), "figure": str(out / "samples.png"),
           "count": int(latents.shape[0])})


def cmd_gap_report(cfg, args):
    from alignlab.plotting import plot_gap
    from alignlab.report import write_report
    from alignlab.trainer.align import build_alignnet, build_world, corpora
    from alignlab.trainer.gap import modality_gap_report

    out = _out(args)
    (out / "config.json").write_text(cfg.to_json())
    trained = _trained_alignnet(cfg, args)
    rows = modality_gap_report(build_world(cfg), build_alignnet(cfg), trained, corpora(cfg)[1], cfg)
    write_report(out, "gap", {"rows": rows}, rows)
    plot_gap(rows, out / "gap.png")
    sys.stdout.write((out / "gap.txt").read_text())
    _emit({"verb": args.verb, "report": str(out / "gap.json"), "modalities": [r["modality"] for r in rows]})


def cmd_selftest(cfg, args):
    from alignlab import selftest

    if not selftest.run():
        raise AlignLabError("selftest failed")
    _emit({"verb": args.verb, "status": "ok"})


COMMANDS = {
    "train-align": cmd_train_align,
    "train-lightcontrol": cmd_train_lightcontrol,
    "train-lora": cmd_train_lora,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "gap-report": cmd_gap_report,
    "selftest": cmd_selftest,
}


def _fail(exc: BaseException, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg, "exit": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        if cfg.strict:
            from alignlab.trainer.align import set_determinism

            set_determinism(True)
        COMMANDS[args.verb](cfg, args)
    except (ConfigError, UsageError) as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
