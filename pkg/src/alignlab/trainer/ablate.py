"""One-axis ablations over AlignNet strategy, tap position and divergence."""
from __future__ import annotations

from pathlib import Path

from alignlab.errors import UsageError
from alignlab.trainer.align import build_world, corpora, evaluate_alignment, train_align
from alignlab.trainer.config import RunConfig

AXES = {
    "alignnet": ("alignnet__strategy", ("A1", "A3_mean", "ADA", "CNN")),
    "position": ("tap", ("attn", "ln", "ff", "block", "oneside")),
    "loss": ("loss__kind", ("mse", "kl", "js", "rkl")),
}
COLUMNS = ("variant", "final_loss", "smoothed_loss", "latent_cosine", "ssim", "teacher_mse")


def variant_configs(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    if axis not in AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; expected one of {tuple(AXES)}")
    key, values = AXES[axis]
    return [(v, cfg.replace(**{key: v})) for v in values]


def ablate(cfg: RunConfig, axis: str, out_dir=None) -> dict:
    """Train every variant with the same seed and steps, then score it on the held-out prompts."""
    variants = variant_configs(cfg, axis)
    world = build_world(cfg)
    prompts, held = corpora(cfg)
    rows = []
    for name, vcfg in variants:
        sub = Path(out_dir) / name if out_dir is not None else None
        result = train_align(vcfg, out_dir=sub, world=world, prompts=prompts)
        scores = evaluate_alignment(world, result.alignnet, held, vcfg)
        rows.append({
            "variant": name,
            "final_loss": result.losses[-1],
            "smoothed_loss": result.smoothed_losses(vcfg.ema_alpha)[-1],
            **{k: scores[k] for k in ("latent_cosine", "ssim", "teacher_mse")},
            "checkpoint_hash": result.checkpoint_hash,
        })
    report = {"axis": axis, "seed": cfg.seed, "steps": cfg.steps, "rows": rows}
    if out_dir is not None:
        from alignlab.plotting import plot_ablation
        from alignlab.report import write_report

        write_report(out_dir, "report", report, rows, COLUMNS)
        plot_ablation(rows, Path(out_dir) / "ablation.png")
    return report
