import pytest
import torch

from alignlab.encoders import EncoderConfig
from alignlab.mmdit import MMDiTConfig
from alignlab.trainer.config import RunConfig


def f64(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def tiny_mmdit(**kw):
    base = dict(hidden=8, heads=2, blocks=2, latent_size=4, patch=2, latent_channels=2, d_c=6, d_p=4,
                time_freq=8)
    base.update(kw)
    return MMDiTConfig(**base)


@pytest.fixture
def small_cfg():
    """A run config small enough for second-scale training tests."""
    enc = EncoderConfig(vocab_size=128, width=16, heads=2, teacher_layers=1, clip_layers=1, student_depth=2,
                        d_c=12, d_p=8, max_seq=16, template_seq=80, token_width=16)
    cfg = RunConfig(encoder=enc)
    return cfg.replace(
        mmdit__hidden=16, mmdit__heads=2, mmdit__blocks=2, mmdit__d_c=12, mmdit__d_p=8,
        mmdit__time_freq=16,
        lightcontrol__blocks=2, lightcontrol__hidden=16, lightcontrol__d_p=8, lightcontrol__channels=8,
        alignnet__mlp_hidden=16,
        steps=6, lightcontrol_steps=6, lora_steps=6, batch_size=4, n_prompts=16, n_heldout=4,
        n_pairs=8, n_val_pairs=4,
    )


# ---------------------------------------------------------------- acceptance lines

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line; all lines are echoed in the terminal summary."""

    def record(label: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
