import json
import threading

import numpy as np
import pytest
import torch

from alignlab.alignnet import parameter_hash
from alignlab.errors import TrainingError, UsageError
from alignlab.mmdit import TAP_POSITIONS
from alignlab.trainer import align as align_mod
from alignlab.trainer import checkpoint as ckpt_io
from alignlab.trainer.ablate import ablate, variant_configs
from alignlab.trainer.align import (build_alignnet, build_world, corpora, evaluate_alignment, load_alignnet,
                                    overlapped_batches, prepare_batch, sequential_batches, train_align)
from alignlab.trainer.data import batch_indices, read_prompts, step_seed, synthetic_prompts
from alignlab.trainer.enhance import train_lightcontrol, train_lora
from alignlab.trainer.gap import MODALITIES, modality_gap_report


def _module_state(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _unchanged(module, before):
    return all(torch.equal(v, before[k]) for k, v in module.state_dict().items())


def test_data_helpers(tmp_path):
    assert synthetic_prompts(5, 0) == synthetic_prompts(5, 0)
    assert synthetic_prompts(5, 0) != synthetic_prompts(5, 1)
    assert step_seed(0, 3) == step_seed(0, 3) != step_seed(0, 4)
    idx = batch_indices(0, 2, 10, 4)
    assert len(idx) == 4 and all(0 <= i < 10 for i in idx)
    (tmp_path / "p.txt").write_text("a cat\n\n a dog \n")
    assert read_prompts(tmp_path / "p.txt") == ["a cat", "a dog"]
    (tmp_path / "e.txt").write_text("\n")
    with pytest.raises(UsageError):
        read_prompts(tmp_path / "e.txt")


def test_train_align_artifacts_and_trainable_set(small_cfg, tmp_path):
    world = build_world(small_cfg)
    frozen = {name: _module_state(m) for name, m in
              (("teacher", world.teacher), ("student", world.student), ("generator", world.generator))}
    result = train_align(small_cfg, out_dir=tmp_path, world=world)
    for name, m in (("teacher", world.teacher), ("student", world.student), ("generator", world.generator)):
        assert _unchanged(m, frozen[name])
        assert all(p.grad is None and not p.requires_grad for p in m.parameters())
    assert all(p.grad is not None for p in result.alignnet.parameters())
    assert parameter_hash(result.alignnet) != parameter_hash(build_alignnet(small_cfg))

    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(small_cfg.steps))
    assert set(records[0]) == {"step", "loss", "loss_per_block", "lr", "wall_ms", "seed"}
    assert len(records[0]["loss_per_block"]) == small_cfg.mmdit.blocks
    assert (tmp_path / "loss.png").stat().st_size > 0
    assert json.loads((tmp_path / "config.json").read_text()) == small_cfg.to_dict()
    assert ckpt_io.file_hash(tmp_path / "checkpoint.x2i") == result.checkpoint_hash


def test_loaded_checkpoint_reproduces_forward(small_cfg, tmp_path):
    world = build_world(small_cfg)
    result = train_align(small_cfg, out_dir=tmp_path, world=world)
    loaded = load_alignnet(small_cfg, ckpt_io.load(tmp_path / "checkpoint.x2i"))
    stack = world.student.encode(["a red cat on a mat"], world.seq_len)
    a, b = result.alignnet(stack), loaded(stack)
    assert torch.equal(a.y, b.y) and torch.equal(a.y_p, b.y_p)


@pytest.mark.parametrize("tap", TAP_POSITIONS)
def test_teacher_wired_student_has_zero_loss(small_cfg, tap):
    cfg = small_cfg.replace(student="teacher", tap=tap, alignnet__strategy="A1", alignnet__phi="identity", steps=3)
    result = train_align(cfg)
    assert max(result.losses) < 1e-9


def test_nan_loss_aborts_with_dump(small_cfg, tmp_path, monkeypatch):
    monkeypatch.setattr(align_mod, "block_divergences", lambda *a, **k: [torch.tensor(float("nan"))])
    with pytest.raises(TrainingError, match="batch seed"):
        train_align(small_cfg, out_dir=tmp_path)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and len(dump["prompts"]) == small_cfg.batch_size


def test_overlapped_matches_sequential_bitwise_in_strict_mode(small_cfg, tmp_path):
    cfg = small_cfg.replace(steps=10, strict=True)
    seq = train_align(cfg, out_dir=tmp_path / "seq")
    ovl = train_align(cfg.replace(pipeline="overlapped"), out_dir=tmp_path / "ovl")
    assert seq.checkpoint_hash == ovl.checkpoint_hash
    torch.set_num_threads(torch.get_num_threads())


def test_overlapped_preserves_order_and_propagates_errors():
    seen = []

    def produce(step):
        seen.append(threading.current_thread().name)
        return align_mod.PreparedBatch(step, 0, [], None, None, None, None)

    assert [b.step for b in overlapped_batches(produce, 6)] == list(range(6))
    assert set(seen) == {"teacher-prefetch"}

    def failing(step):
        if step == 2:
            raise RuntimeError("teacher exploded")
        return align_mod.PreparedBatch(step, 0, [], None, None, None, None)

    with pytest.raises(RuntimeError, match="exploded"):
        list(overlapped_batches(failing, 5))

    def shuffled(step):
        return align_mod.PreparedBatch(5 - step, 0, [], None, None, None, None)

    with pytest.raises(TrainingError, match="out of order"):
        list(overlapped_batches(shuffled, 3))


def test_prepared_batches_are_reproducible(small_cfg):
    world = build_world(small_cfg)
    prompts, _ = corpora(small_cfg)
    a = prepare_batch(world, small_cfg, prompts, 3)
    b = next(x for x in sequential_batches(lambda s: prepare_batch(world, small_cfg, prompts, s), 4) if x.step == 3)
    assert a.prompts == b.prompts and torch.equal(a.latent, b.latent)


def test_uniform_timesteps_stay_in_range(small_cfg):
    cfg = small_cfg.replace(t_mode="uniform", t_lo=0.5)
    world = build_world(cfg)
    batch = prepare_batch(world, cfg, corpora(cfg)[0], 0)
    assert ((batch.t >= 0.5) & (batch.t <= 1.0)).all()
    assert not torch.equal(batch.latent, align_mod.gaussian(batch.latent.shape, batch.seed))


def test_determinism_of_logs(small_cfg, tmp_path):
    cfg = small_cfg.replace(strict=True)
    a = train_align(cfg, out_dir=tmp_path / "a")
    b = train_align(cfg, out_dir=tmp_path / "b")
    assert a.checkpoint_hash == b.checkpoint_hash
    strip = [{k: v for k, v in r.items() if k != "wall_ms"} for r in a.records]
    assert strip == [{k: v for k, v in r.items() if k != "wall_ms"} for r in b.records]


def test_evaluation_keys(small_cfg):
    world = build_world(small_cfg)
    scores = evaluate_alignment(world, build_alignnet(small_cfg), corpora(small_cfg)[1], small_cfg)
    assert set(scores) == {"latent_cosine", "teacher_mse", "ssim", "displacement_cosine"}


def test_lightcontrol_stage(small_cfg, tmp_path):
    stage1 = train_align(small_cfg)
    world = build_world(small_cfg)
    gen_state = _module_state(world.generator)
    result = train_lightcontrol(small_cfg, stage1.checkpoint, out_dir=tmp_path, world=world)
    assert result.initial_val == result.baseline_val
    assert _unchanged(world.generator, gen_state)
    groups = {k.split(".")[0] for k in result.checkpoint.arrays}
    assert groups == {"alignnet", "lightcontrol"}
    for k, v in stage1.checkpoint.arrays.items():
        assert np.array_equal(result.checkpoint.arrays[k], v)
    assert all(p.grad is not None for p in result.lightcontrol.parameters())
    assert (tmp_path / "summary.json").exists()


def test_lightcontrol_needs_stage1(small_cfg, tmp_path):
    with pytest.raises(UsageError):
        train_lightcontrol(small_cfg)
    with pytest.raises(UsageError):
        train_lightcontrol(small_cfg, str(tmp_path / "nope.x2i"))


def test_lora_stage(small_cfg):
    world = build_world(small_cfg)
    gen_state = _module_state(world.generator)
    result = train_lora(small_cfg, world=world)
    assert result.initial_val == result.baseline_val
    assert _unchanged(world.generator, gen_state)
    assert all(k.startswith("lora.") for k in result.checkpoint.arrays)
    trainable = {n for n, p in result.model.named_parameters() if p.requires_grad}
    assert trainable and all(n.endswith((".A", ".B")) for n in trainable)


def test_gap_report(small_cfg):
    world = build_world(small_cfg)
    trained = train_align(small_cfg, world=world).alignnet
    rows = modality_gap_report(world, build_alignnet(small_cfg), trained, corpora(small_cfg)[1], small_cfg)
    assert [r["modality"] for r in rows] == list(MODALITIES)
    assert all(0.0 <= r["trained_distance"] <= 2.0 for r in rows)
    with pytest.raises(UsageError):
        modality_gap_report(world, trained, trained, ["a"], small_cfg, modalities=("text",))


def test_ablation_axes(small_cfg, tmp_path):
    assert [v for v, _ in variant_configs(small_cfg, "position")] == ["attn", "ln", "ff", "block", "oneside"]
    assert [v for v, _ in variant_configs(small_cfg, "alignnet")] == ["A1", "A3_mean", "ADA", "CNN"]
    with pytest.raises(UsageError):
        variant_configs(small_cfg, "depth")
    report = ablate(small_cfg.replace(steps=2), "loss", out_dir=tmp_path)
    assert [r["variant"] for r in report["rows"]] == ["mse", "kl", "js", "rkl"]
    assert (tmp_path / "report.txt").read_text().count("\n") == 6
    assert json.loads((tmp_path / "report.json").read_text())["axis"] == "loss"
    assert (tmp_path / "ablation.png").exists()
