"""Fast oracle and gradient checks for a healthy build."""
from __future__ import annotations

import math
import tempfile
import warnings
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from alignlab import diffcore as dc
from alignlab.alignnet import AlignedCondition
from alignlab.distill import divergence
from alignlab.lightcontrol import LightControl, LightControlConfig
from alignlab.mmdit import MMDiT, MMDiTConfig, attach_lora, lora_targets
from alignlab.trainer import checkpoint as ckpt_io
from alignlab.trainer.metrics import FB_SPEC, IR_SPEC, pr_metric, ssim

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10


def _small_mmdit(**kw) -> MMDiTConfig:
    base = dict(hidden=8, heads=2, blocks=1, latent_size=4, patch=2, latent_channels=2, d_c=6, d_p=4,
                time_freq=8)
    base.update(kw)
    return MMDiTConfig(**base)


def _grad_checks(seed: int) -> dict[str, float]:
    g = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    w3, b3 = rnd(3, 4), rnd(3)
    other, w23, weights = rnd(4, 3), rnd(2, 3), rnd(2, 5)
    kernel = rnd(1, 3, 3, 3)
    errs = {
        "matmul": dc.grad_check(lambda x: (dc.matmul(x, other) * w23).sum(), rnd(2, 4)),
        "softmax": dc.grad_check(lambda x: (dc.softmax(x) * weights).sum(), rnd(2, 5)),
        "layer_norm": dc.grad_check(lambda x: (dc.layer_norm(x) * weights).sum(), rnd(2, 5)),
        "silu": dc.grad_check(lambda x: (dc.silu(x) * weights).sum(), rnd(2, 5)),
        "linear": dc.grad_check(lambda x: dc.linear(x, w3, b3).pow(2).sum(), rnd(2, 4)),
        "conv_layers": dc.grad_check(lambda x: dc.conv_layers(x, kernel, 3, 1).pow(2).sum(), rnd(1, 3, 5, 4)),
    }
    model = MMDiT(_small_mmdit(), seed=seed).double()
    block = model.double_blocks[0]
    c, vec = rnd(1, 3, 8), rnd(1, 8)
    wx, wc = rnd(1, 4, 8), rnd(1, 3, 8)

    def f(x):
        x_o, c_o, _ = block(x, c, vec)
        return (x_o * wx).sum() + (c_o * wc).sum()

    errs["mmdit_block"] = dc.grad_check(f, rnd(1, 4, 8))
    return errs


def _np_kl(p, q):
    return float(np.mean(np.sum(p * np.log(p / q), axis=-1)))


def divergence_oracle_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(8), size=4)
    q = rng.dirichlet(np.ones(8), size=4)
    m = 0.5 * (p + q)
    expected = {
        "kl": _np_kl(p, q),
        "rkl": _np_kl(q, p),
        "js": 0.5 * _np_kl(p, m) + 0.5 * _np_kl(q, m),
        "mse": float(np.mean((p - q) ** 2)),
    }
    tp, tq = torch.from_numpy(p), torch.from_numpy(q)
    return max(abs(float(divergence(tp, tq, k)) - v) for k, v in expected.items())


def identity_at_zero() -> bool:
    model = MMDiT(_small_mmdit(zero_modulation=True), seed=3).double()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 4, 8, generator=g, dtype=torch.float64)
    c = torch.randn(2, 3, 8, generator=g, dtype=torch.float64)
    vec = torch.randn(2, 8, generator=g, dtype=torch.float64)
    x_o, c_o, _ = model.double_blocks[0](x, c, vec)
    return torch.equal(x_o, x) and torch.equal(c_o, c)


def fresh_adapters_are_noops() -> bool:
    cfg = MMDiTConfig()
    base = MMDiT(cfg, seed=0)
    g = torch.Generator().manual_seed(1)
    latent = torch.randn(2, *cfg.latent_shape, generator=g)
    cond = AlignedCondition(torch.randn(2, 5, cfg.d_c, generator=g), torch.randn(2, cfg.d_p, generator=g),
                            torch.ones(2, 5, dtype=torch.bool))
    ref, _ = base(latent, cond, 1.0)
    net = LightControl(LightControlConfig(), seed=0)
    refs = torch.randn(2, cfg.latent_channels, cfg.latent_size, cfg.latent_size, generator=g)
    with_ctrl, _ = base(latent, cond, 1.0, control=net(refs, cond.y_p))
    adapted = MMDiT(cfg, seed=0)
    attach_lora(adapted, lora_targets(adapted), rank=4, seed=0)
    with_lora, _ = adapted(latent, cond, 1.0)
    return torch.equal(ref, with_ctrl) and torch.equal(ref, with_lora)


def metric_checks() -> bool:
    x = np.random.default_rng(0).standard_normal((8, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ok = ssim(x, x, data_range=float(x.max() - x.min())) == 1.0
        ok &= pr_metric([3.0, 0.5], [3.0, 0.5], [FB_SPEC, IR_SPEC]) == 100.0
        ok &= math.isclose(FB_SPEC.normalize(3.0), 0.5)
    return bool(ok)


def checkpoint_roundtrip() -> bool:
    arrays = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "a.b": np.array([1.5, -2.0])}
    ckpt = ckpt_io.Checkpoint({"seed": 0}, arrays, 7, {"seed": 0})
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "c.x2i"
        ckpt_io.save(ckpt, path)
        back = ckpt_io.load(path)
    return back.to_bytes() == ckpt.to_bytes()


def run(seeds: int = 20, echo: Callable[[str], None] = print) -> bool:
    results: list[tuple[str, bool, str]] = []
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, err in _grad_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        results.append((f"grad_check[{name}]", err < GRAD_TOL, f"max rel err {err:.2e} over {seeds} seeds"))
    div_err = max(divergence_oracle_error(s) for s in range(seeds))
    results.append(("divergence_oracles", div_err < ORACLE_TOL, f"max abs err {div_err:.2e}"))
    results.append(("identity_at_zero", identity_at_zero(), "zero modulation block"))
    results.append(("fresh_adapters_noop", fresh_adapters_are_noops(), "LoRA and LightControl"))
    results.append(("metrics", metric_checks(), "ssim(x,x), pr_metric"))
    results.append(("checkpoint_roundtrip", checkpoint_roundtrip(), "bytes identical"))
    for name, ok, detail in results:
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all(ok for _, ok, _ in results)
