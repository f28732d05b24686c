"""Acceptance criteria, one test per criterion, at the stated tolerances.

Criteria 5 and 6 train the default-size model for 2000 steps and take a few
minutes on one CPU core.
"""
import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
from torch.func import functional_call

from alignlab import diffcore as dc
from alignlab.alignnet import AlignedCondition
from alignlab.distill import divergence
from alignlab.lightcontrol import LightControl
from alignlab.mmdit import MMDiT, MMDiTConfig, TAP_POSITIONS, attach_lora, lora_targets
from alignlab.trainer import checkpoint as ckpt_io
from alignlab.trainer.align import build_world, corpora, evaluate_alignment, load_alignnet, train_align
from alignlab.trainer.config import RunConfig
from alignlab.trainer.enhance import train_lightcontrol, train_lora
from alignlab.trainer.gap import modality_gap_report
from alignlab.trainer.metrics import MetricSpec, gaussian_window, pr_metric, ssim

PILOT = Path(__file__).resolve().parent.parent / "pilot"
SEEDS = range(20)
CHUNK = 256


def f64(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def reference_config(**changes) -> RunConfig:
    """CNN AlignNet, attn tap, RKL, 512 prompts, 2000 steps, default dims, seed 0."""
    return RunConfig().replace(**changes)


@pytest.fixture(scope="module")
def reference():
    cfg = reference_config()
    world = build_world(cfg)
    t0 = time.perf_counter()
    result = train_align(cfg, world=world)
    minutes = (time.perf_counter() - t0) / 60
    held = corpora(cfg)[1]
    return {"cfg": cfg, "world": world, "result": result, "minutes": minutes,
            "scores": evaluate_alignment(world, result.alignnet, held, cfg), "held": held}


# ---------------------------------------------------------------- 1

def test_criterion_01_gradient_integrity(verdict):
    t0 = time.perf_counter()
    worst, key_bias = {}, 0.0
    cfg = MMDiTConfig(hidden=8, heads=2, blocks=1, latent_size=4, patch=2, latent_channels=2, d_c=6, d_p=4,
                      time_freq=8)
    for seed in SEEDS:
        w, W, b = f64(2, 5, seed=seed + 1), f64(3, 5, seed=seed + 2), f64(3, seed=seed + 3)
        K = f64(1, 2, 3, 3, seed=seed + 4)
        x = f64(2, 5, seed=seed)
        errs = {
            "matmul": dc.grad_check(lambda v: (dc.matmul(v, W.T) ** 2).sum(), x),
            "softmax": dc.grad_check(lambda v: (dc.softmax(v) * w).sum(), x),
            "layer_norm": dc.grad_check(lambda v: (dc.layer_norm(v) * w).sum(), x),
            "silu": dc.grad_check(lambda v: (dc.silu(v) * w).sum(), x),
            "linear": dc.grad_check(lambda v: dc.linear(v, W, b).pow(2).sum(), x),
            "conv_layers": dc.grad_check(lambda h: dc.conv_layers(h, K, 3, 1).pow(2).sum(), f64(1, 2, 4, 5, seed=seed)),
        }
        block = MMDiT(cfg, seed=seed).double().double_blocks[0]
        xs, cs, vec = f64(1, 4, 8, seed=seed + 5), f64(1, 3, 8, seed=seed + 6), f64(1, 8, seed=seed + 7)
        wx, wc = f64(1, 4, 8, seed=seed + 8), f64(1, 3, 8, seed=seed + 9)
        names = [n for n, _ in block.named_parameters() if n != "attn.k.bias"]
        shapes = {n: p.shape for n, p in block.named_parameters()}
        fixed = {"attn.k.bias": block.attn.k.bias.detach()}

        def block_loss(theta, xx=xs, cc=cs, vv=vec):
            params, i = dict(fixed), 0
            for n in names:
                params[n] = theta[i:i + shapes[n].numel()].reshape(shapes[n])
                i += shapes[n].numel()
            x_o, c_o, _ = functional_call(block, params, (xx, cc, vv))
            return (x_o * wx).sum() + (c_o * wc).sum()

        theta = torch.cat([dict(block.named_parameters())[n].detach().reshape(-1) for n in names])
        errs["block_params"] = dc.grad_check(block_loss, theta, chunk=CHUNK)
        errs["block_x"] = dc.grad_check(lambda v: block_loss(theta, xx=v), xs, chunk=CHUNK)
        errs["block_c"] = dc.grad_check(lambda v: block_loss(theta, cc=v), cs, chunk=CHUNK)
        errs["block_vec"] = dc.grad_check(lambda v: block_loss(theta, vv=v), vec, chunk=CHUNK)
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
        # the key bias adds a per-query constant to every logit, so softmax cancels it exactly;
        # its true gradient is zero and is checked in absolute terms
        kb = block.attn.k.bias.requires_grad_(True)
        x_o, c_o, _ = block(xs, cs, vec)
        (g_kb,) = torch.autograd.grad((x_o * wx).sum() + (c_o * wc).sum(), kb)
        key_bias = max(key_bias, float(g_kb.abs().max()))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-4 and key_bias < 1e-12 and elapsed < 120
    verdict("1 gradient integrity", ok,
            f"max rel err {top:.2e} (<1e-4) over {len(SEEDS)} seeds; key-bias |grad| {key_bias:.1e}; "
            f"{elapsed:.0f}s (<120s)")
    assert ok, worst


# ---------------------------------------------------------------- 2

def _np_kl(p, q):
    return np.sum(p * np.log(p / q), axis=-1)


def test_criterion_02_divergence_oracles(verdict):
    rng = np.random.default_rng(2)
    err = 0.0
    for _ in range(200):
        p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        m = (p + q) / 2
        want = {"kl": _np_kl(p, q), "rkl": _np_kl(q, p), "js": (_np_kl(p, m) + _np_kl(q, m)) / 2,
                "mse": np.mean((p - q) ** 2)}
        for kind, v in want.items():
            err = max(err, abs(float(divergence(torch.from_numpy(p), torch.from_numpy(q), kind)) - v))
    P = torch.from_numpy(rng.dirichlet(np.ones(8) * 0.5, size=10_000))
    Q = torch.from_numpy(rng.dirichlet(np.ones(8) * 0.5, size=10_000))
    vals = {k: torch.stack([divergence(P[i], Q[i], k) for i in range(10_000)]) for k in ("kl", "rkl", "js", "mse")}
    nonneg = all(bool((v >= 0).all()) for v in vals.values())
    js_max = float(vals["js"].max())
    ok = err < 1e-10 and nonneg and js_max <= math.log(2)
    verdict("2 divergence oracles", ok,
            f"max abs err {err:.1e} (<1e-10); non-negative on 1e4 pairs: {nonneg}; max JS {js_max:.4f} <= ln2")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_03_identity_at_zero(verdict):
    cfg = MMDiTConfig(zero_modulation=True)
    model = MMDiT(cfg, seed=0).double()
    x, c, vec = f64(2, cfg.tokens, cfg.hidden, seed=1), f64(2, 7, cfg.hidden, seed=2), f64(2, cfg.hidden, seed=3)
    identity = all(torch.equal(out, x) and torch.equal(out_c, c)
                   for out, out_c, _ in (blk(x, c, vec) for blk in model.double_blocks))

    rc = RunConfig()
    base = MMDiT(rc.mmdit, seed=0)
    g = torch.Generator().manual_seed(0)
    latent = torch.randn(2, *rc.mmdit.latent_shape, generator=g)
    cond = AlignedCondition(torch.randn(2, 9, rc.mmdit.d_c, generator=g), torch.randn(2, rc.mmdit.d_p, generator=g),
                            torch.ones(2, 9, dtype=torch.bool))
    ref, _ = base(latent, cond, 1.0)
    adapted = attach_lora(MMDiT(rc.mmdit, seed=0), lora_targets(base), rc.lora.rank)
    lora_noop = torch.equal(adapted(latent, cond, 1.0)[0], ref)
    net = LightControl(rc.lightcontrol, seed=0)
    refs = torch.randn(2, *rc.mmdit.latent_shape, generator=g)
    lc_noop = torch.equal(base(latent, cond, 1.0, control=net(refs, cond.y_p))[0], ref)
    ok = identity and lora_noop and lc_noop
    verdict("3 identity at zero", ok,
            f"zero-mod blocks exact identity (f64): {identity}; fresh LoRA bitwise: {lora_noop}; "
            f"fresh LightControl bitwise: {lc_noop}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_zero_loss_sanity(verdict):
    worst = {}
    for tap in TAP_POSITIONS:
        cfg = RunConfig().replace(student="teacher", alignnet__strategy="A1", alignnet__phi="identity",
                                  tap=tap, steps=5)
        worst[tap] = max(abs(v) for v in train_align(cfg).losses)
    top = max(worst.values())
    ok = top < 1e-9
    verdict("4 zero-loss sanity", ok, "max |loss| per tap " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
            + " (<1e-9)")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_05_convergence(reference, verdict):
    res = reference["result"]
    initial, final = res.losses[0], res.smoothed_losses(0.01)[-1]
    cos = reference["scores"]["latent_cosine"]
    ok = final < 0.1 * initial and cos >= 0.95 and reference["minutes"] < 30
    verdict("5 convergence", ok,
            f"smoothed final loss {final:.4f} vs 0.1x initial {0.1 * initial:.4f}; held-out latent cosine "
            f"{cos:.4f} (>=0.95, n={len(reference['held'])}); {reference['minutes']:.1f} min (<30)")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_06_ablation_direction(reference, verdict):
    cfg = reference["cfg"].replace(tap="block")
    world = reference["world"]
    block = train_align(cfg, world=world)
    block_mse = evaluate_alignment(world, block.alignnet, reference["held"], cfg)["teacher_mse"]
    attn_mse = reference["scores"]["teacher_mse"]
    ok = attn_mse < block_mse
    verdict("6 ablation direction", ok,
            f"held-out teacher-output MSE attn {attn_mse:.5f} vs block {block_mse:.5f} (need attn < block)")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_07_pipeline_equivalence(verdict, tmp_path):
    cfg = reference_config(steps=10)
    world = build_world(cfg)
    strict = cfg.replace(strict=True)
    h_seq = train_align(strict, tmp_path / "s", world=world).checkpoint_hash
    h_ovl = train_align(strict.replace(pipeline="overlapped"), tmp_path / "o", world=world).checkpoint_hash
    loose_seq = train_align(cfg, world=world).checkpoint.arrays
    loose_ovl = train_align(cfg.replace(pipeline="overlapped"), world=world).checkpoint.arrays
    diff = max(float(np.abs(loose_seq[k] - loose_ovl[k]).max()) for k in loose_seq)
    ok = h_seq == h_ovl and diff <= 1e-6
    verdict("7 pipeline equivalence", ok,
            f"strict hashes equal: {h_seq == h_ovl}; non-strict max-abs param diff {diff:.1e} (<=1e-6); 10 batches")
    assert ok


# ---------------------------------------------------------------- 8

def _ssim_oracle(a, b, L):
    w = gaussian_window()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    out = []
    for i in range(a.shape[0] - 6):
        for j in range(a.shape[1] - 6):
            pa, pb = a[i:i + 7, j:j + 7], b[i:i + 7, j:j + 7]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            out.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(out))


def test_criterion_08_metric_correctness(verdict):
    rng = np.random.default_rng(8)
    self_one = all(ssim(x, x, float(np.ptp(x))) == 1.0 for x in rng.standard_normal((10, 8, 8)))
    err = max(abs(ssim(a, b, 1.0) - _ssim_oracle(a, b, 1.0)) for a, b in rng.uniform(size=(10, 2, 8, 8)))
    s1, s2 = MetricSpec("m1", 0.0, 1.0), MetricSpec("m2", 0.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        identity = pr_metric([0.3, 0.8], [0.3, 0.8], [s1, s2])
        two = pr_metric([0.5, 1.0], [1.0, 1.0], [s1, s2])
    ok = self_one and err < 1e-8 and identity == 100.0 and two == 75.0
    verdict("8 metric correctness", ok,
            f"ssim(x,x)==1: {self_one}; oracle err {err:.1e} (<1e-8); PR identity {identity}%, two-metric {two}%")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_09_serialization(verdict, tmp_path, reference):
    cfg, world = reference["cfg"], reference["world"]
    stage1 = reference["result"]
    path = tmp_path / "a.x2i"
    ckpt_io.save(stage1.checkpoint, path)
    loaded = ckpt_io.load(path)
    bytes_equal = loaded.to_bytes() == stage1.checkpoint.to_bytes() == path.read_bytes()
    arrays_equal = all(np.array_equal(loaded.arrays[k], v) for k, v in stage1.checkpoint.arrays.items())
    net = load_alignnet(cfg, loaded)
    stack = world.student.encode(reference["held"][:8], world.seq_len)
    a, b = stage1.alignnet(stack), net(stack)
    forward_equal = torch.equal(a.y, b.y) and torch.equal(a.y_p, b.y_p)
    ok = bytes_equal and arrays_equal and forward_equal
    verdict("9 serialization", ok,
            f"bytes round-trip: {bytes_equal}; arrays: {arrays_equal}; AlignNet forward bitwise: {forward_equal}")
    assert ok


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism(verdict, tmp_path):
    cfg = reference_config(steps=25, strict=True)
    runs = [train_align(cfg, out_dir=tmp_path / name) for name in ("a", "b")]

    def log(d):
        return [{k: v for k, v in json.loads(line).items() if k != "wall_ms"}
                for line in (tmp_path / d / "log.jsonl").read_text().splitlines()]

    same_hash = runs[0].checkpoint_hash == runs[1].checkpoint_hash
    same_log = log("a") == log("b")
    ok = same_hash and same_log
    verdict("10 determinism", ok, f"strict checkpoint hashes equal: {same_hash}; JSONL logs equal modulo wall_ms: {same_log}")
    assert ok


# ---------------------------------------------------------------- pilot-frozen gates

def test_gate_lightcontrol_beats_frozen_baseline(reference, verdict):
    cfg, res = reference["cfg"], reference["result"]
    out = train_lightcontrol(cfg, res.checkpoint, world=reference["world"])
    ok = out.initial_val == out.baseline_val and out.final_val <= 0.8 * out.baseline_val
    verdict("gate LightControl", ok, f"step-0 val == baseline: {out.initial_val == out.baseline_val}; "
            f"val {out.final_val:.4f} vs 0.8x baseline {0.8 * out.baseline_val:.4f} after {cfg.lightcontrol_steps} steps")
    assert ok


def test_gate_lora_reduces_style_loss(reference, verdict):
    cfg, res = reference["cfg"], reference["result"]
    out = train_lora(cfg, res.checkpoint, world=reference["world"])
    ok = out.initial_val == out.baseline_val and out.final_val < out.initial_val
    verdict("gate LoRA", ok, f"val {out.initial_val:.4f} -> {out.final_val:.4f} after {cfg.lora_steps} steps")
    assert ok


def test_gate_modality_gap_text_shrinks(reference, verdict):
    from alignlab.trainer.align import build_alignnet

    cfg = reference["cfg"]
    rows = modality_gap_report(reference["world"], build_alignnet(cfg), reference["result"].alignnet,
                               reference["held"], cfg)
    text = rows[0]
    ok = text["modality"] == "text" and text["trained_distance"] < text["init_distance"]
    verdict("gate modality gap", ok, f"text distance {text['init_distance']:.4f} -> {text['trained_distance']:.4f}")
    assert ok


def test_pilot_record_is_committed(verdict):
    summary = json.loads((PILOT / "attn.summary.json").read_text())
    ok = summary["smoothed_final_loss"] < 0.1 * summary["initial_loss"] and summary["latent_cosine"] >= 0.95
    verdict("pilot record", ok, f"committed pilot: smoothed {summary['smoothed_final_loss']:.4f}, "
            f"initial {summary['initial_loss']:.4f}, cosine {summary['latent_cosine']:.4f}")
    assert ok
