"""Prompt corpora and per-step seeding."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from alignlab.errors import UsageError

COLORS = ("red", "green", "blue", "yellow", "black", "white", "orange", "purple", "pink",
          "brown", "gray", "golden")
OBJECTS = ("cat", "dog", "car", "house", "tree", "cube", "sphere", "bird", "boat", "flower",
           "chair", "lamp", "robot", "castle", "apple")
RELATIONS = ("on", "under", "beside", "behind", "near", "above")
STYLES = ("", "", "", "in watercolor", "at night", "in the snow", "made of glass")


def synthetic_prompts(count: int, seed: int) -> list[str]:
    rng = np.random.default_rng([seed, 7919])
    out = []
    for _ in range(count):
        a, b = rng.choice(COLORS, 2)
        x, y = rng.choice(OBJECTS, 2)
        rel = rng.choice(RELATIONS)
        style = rng.choice(STYLES)
        text = f"a {a} {x} {rel} a {b} {y}"
        out.append(f"{text} {style}".strip())
    return out


def read_prompts(path) -> list[str]:
    """One prompt per line, UTF-8; blank lines skipped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read prompt corpus {path}: {exc}") from exc
    prompts = [line.strip() for line in lines if line.strip()]
    if not prompts:
        raise UsageError(f"prompt corpus {path} is empty")
    return prompts


def step_seed(seed: int, step: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, step]).generate_state(1)[0])


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> list[int]:
    rng = np.random.default_rng(step_seed(seed, step, 1))
    return rng.choice(n, size=batch_size, replace=n < batch_size).tolist()
