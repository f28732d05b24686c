import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alignlab.distill import (DivergenceKind, block_divergences, divergence, feature_divergence,
                              layer_distill_loss, normalize_attn)
from alignlab.errors import ConfigError, UsageError
from alignlab.mmdit import DistillTapSet, TapEntry
from conftest import f64

# p = (1..8)/36, q uniform; values from a 40-digit mpmath evaluation
P = torch.arange(1, 9, dtype=torch.float64) / 36
Q = torch.full((8,), 1 / 8, dtype=torch.float64)
FROZEN = {"kl": 0.14264367061173966574, "rkl": 0.17850203393311779482,
          "js": 0.038262038356891530682, "mse": 0.0040509259259259259259}


@pytest.mark.parametrize("kind", sorted(FROZEN))
def test_frozen_oracle_values(kind):
    assert abs(float(divergence(P, Q, kind)) - FROZEN[kind]) < 1e-10


def _np_kl(p, q):
    return np.sum(p * np.log(p / q), axis=-1).mean()


@pytest.mark.parametrize("seed", range(10))
def test_brute_force_oracles(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(8), size=(3, 5)), rng.dirichlet(np.ones(8), size=(3, 5))
    m = (p + q) / 2
    tp, tq = torch.from_numpy(p), torch.from_numpy(q)
    assert abs(float(divergence(tp, tq, "kl")) - _np_kl(p, q)) < 1e-10
    assert abs(float(divergence(tp, tq, "rkl")) - _np_kl(q, p)) < 1e-10
    assert abs(float(divergence(tp, tq, "js")) - (_np_kl(p, m) + _np_kl(q, m)) / 2) < 1e-10
    assert abs(float(divergence(tp, tq, "mse")) - np.mean((p - q) ** 2)) < 1e-10


def test_bounds_on_ten_thousand_pairs():
    rng = np.random.default_rng(1)
    p = torch.from_numpy(rng.dirichlet(np.ones(8) * 0.3, size=10_000))
    q = torch.from_numpy(rng.dirichlet(np.ones(8) * 0.3, size=10_000))
    for kind in ("kl", "rkl", "js", "mse"):
        per_pair = torch.stack([divergence(p[i:i + 1], q[i:i + 1], kind) for i in range(0, 10_000, 97)])
        assert (per_pair >= 0).all()
    m = 0.5 * (p + q)
    js = 0.5 * (p * (p.clamp(min=1e-8) / m).log()).sum(-1) + 0.5 * (q * (q.clamp(min=1e-8) / m).log()).sum(-1)
    assert (js >= -1e-15).all() and (js <= math.log(2) + 1e-12).all()


dist = arrays(np.float64, 8, elements=st.floats(0.0, 1.0)).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


@settings(max_examples=200, deadline=None)
@given(dist, dist)
def test_divergence_properties(p, q):
    tp, tq = torch.from_numpy(p), torch.from_numpy(q)
    for kind in ("kl", "rkl", "js", "mse"):
        assert float(divergence(tp, tq, kind)) >= -1e-12
    assert float(divergence(tp, tq, "js")) <= math.log(2) + 1e-12
    assert float(divergence(tp, tp, "kl")) == pytest.approx(0.0, abs=1e-12)
    assert float(divergence(tp, tq, "js")) == pytest.approx(float(divergence(tq, tp, "js")), abs=1e-12)
    assert float(divergence(tp, tq, "rkl")) == pytest.approx(float(divergence(tq, tp, "kl")), abs=1e-12)


def test_normalize_attn_temperature():
    A = f64(2, 3, 8)
    torch.testing.assert_close(normalize_attn(A, 2.0), torch.softmax(A / 2.0, -1))
    with pytest.raises(ConfigError):
        DivergenceKind("rkl", tau=0.0).validate()
    with pytest.raises(ConfigError):
        DivergenceKind("l1").validate()


def test_shape_mismatch():
    with pytest.raises(UsageError):
        divergence(torch.zeros(2, 8), torch.zeros(2, 7), "kl")


def _taps(position, seed, oneside=False):
    return DistillTapSet(position, [TapEntry(None if oneside else f64(2, 4, 8, seed=seed + i), f64(2, 3, 8, seed=seed + 50 + i))
                                    for i in range(3)])


def test_block_loss_averages_sides_then_blocks():
    s, t = _taps("attn", 0), _taps("attn", 100)
    per_block = block_divergences(s, t, "mse")
    for i, v in enumerate(per_block):
        want = 0.5 * (feature_divergence(t.entries[i].x, s.entries[i].x, "mse")
                      + feature_divergence(t.entries[i].c, s.entries[i].c, "mse"))
        assert torch.equal(v, want)
    assert torch.allclose(layer_distill_loss(s, t, "mse"), torch.stack(per_block).mean())


def test_identical_taps_give_zero_loss():
    s = _taps("ff", 3)
    for kind in ("mse", "kl", "rkl", "js"):
        assert float(layer_distill_loss(s, s, kind)) < 1e-12


def test_tap_set_mismatches():
    with pytest.raises(UsageError):
        block_divergences(_taps("attn", 0), _taps("ln", 0))
    with pytest.raises(UsageError):
        block_divergences(_taps("attn", 0), DistillTapSet("attn", _taps("attn", 0).entries[:2]))
    with pytest.raises(UsageError):
        block_divergences(_taps("oneside", 0, oneside=True), _taps("oneside", 0))
