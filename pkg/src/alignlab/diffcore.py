"""Differentiable numerical core.

Primitives are thin, shape-checked wrappers over torch tensors; torch's
autograd tape plays the role of the computation record and ``backward``
replays it.  ``grad_check`` is a finite-difference verifier that never
touches the tape, so it can be used as an independent oracle for every
primitive and for the composite blocks built on top of them.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

from alignlab.errors import ConfigError, DimensionError, NumericError, UsageError

Tensor = torch.Tensor

_finite_guard = True


@contextlib.contextmanager
def finite_guard(enabled: bool):
    """Toggle the non-finite input checks; they are data-dependent and break ``vmap``."""
    global _finite_guard
    prev, _finite_guard = _finite_guard, enabled
    try:
        yield
    finally:
        _finite_guard = prev

DEFAULT_LN_EPS = 1e-6


def tensor(data, dtype: torch.dtype = torch.float64, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise DimensionError(
            f"matmul batch extents not broadcastable: {tuple(a.shape)} x {tuple(b.shape)}"
        ) from exc
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if _finite_guard and not bool(torch.isfinite(x).all()):
        raise NumericError("softmax received non-finite input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, axis: int = -1, eps: float = DEFAULT_LN_EPS) -> Tensor:
    # population variance, no affine
    mean = x.mean(dim=axis, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=axis, keepdim=True)
    return centered / torch.sqrt(var + eps)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` with ``W`` stored as (out, in)."""
    if W.dim() != 2:
        raise DimensionError(f"linear weight must be rank 2, got {tuple(W.shape)}")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"linear input width {x.shape[-1]} does not match weight {tuple(W.shape)}"
        )
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear bias {tuple(b.shape)} does not match weight {tuple(W.shape)}")
    out = x @ W.transpose(0, 1)
    if b is not None:
        out = out + b
    return out


def conv_layers(H: Tensor, kernel: Tensor, k: int, p: int) -> Tensor:
    """Collapse the layer axis of ``H`` (b, m, s, z) into one channel.

    The m hidden-state layers are treated as input channels of a k x k
    convolution over the (sequence, width) plane with zero padding ``p``
    and a single output channel, no bias.  With ``2p == k - 1`` the
    output keeps the (s, z) extents.
    """
    if H.dim() != 4:
        raise DimensionError(f"conv_layers expects (b, m, s, z), got {tuple(H.shape)}")
    b, m, s, z = H.shape
    if k < 1 or p < 0:
        raise ConfigError(f"invalid kernel size {k} / padding {p}")
    if k > min(s, z) + 2 * p:
        raise ConfigError(f"kernel {k} exceeds padded extent min(s, z) + 2p = {min(s, z) + 2 * p}")
    if tuple(kernel.shape) != (1, m, k, k):
        raise DimensionError(f"kernel must be (1, {m}, {k}, {k}), got {tuple(kernel.shape)}")
    return F.conv2d(H, kernel, padding=p)


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for each leaf in ``wrt``.

    Returns a map keyed by position in ``wrt``; leaves the loss does not
    depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    wrt = list(wrt)
    grads = torch.autograd.grad(loss.reshape(()), wrt, allow_unused=True)
    return {
        i: (torch.zeros_like(leaf) if g is None else g) for i, (leaf, g) in enumerate(zip(wrt, grads))
    }


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, rel_floor: float = 1e-8,
    chunk: int | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, rel_floor)``.  With ``chunk`` set, the
    perturbed evaluations run ``chunk`` coordinates at a time under
    ``torch.func.vmap``; ``f`` must then be free of data-dependent Python
    control flow.  Batched kernels may sum in a different order, so the two
    paths agree to roundoff rather than bitwise.
    """
    x0 = x.detach().clone().to(torch.float64)
    leaf = x0.clone().requires_grad_(True)
    analytic = backward(f(leaf), [leaf])[0].detach().reshape(-1)

    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad(), finite_guard(not chunk):
        if chunk:
            fv = torch.func.vmap(lambda v: f(v.reshape(x0.shape)).reshape(()))
            for start in range(0, flat.numel(), chunk):
                idx = torch.arange(start, min(start + chunk, flat.numel()))
                plus, minus = flat.repeat(len(idx), 1), flat.repeat(len(idx), 1)
                rows = torch.arange(len(idx))
                plus[rows, idx] = flat[idx] + h
                minus[rows, idx] = flat[idx] - h
                numeric[idx] = (fv(plus) - fv(minus)) / (2.0 * h)
        else:
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(f(x0))
                flat[i] = orig - h
                fm = float(f(x0))
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(rel_floor, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max())


def param_count(params: Iterable[Tensor]) -> int:
    return sum(math.prod(p.shape) for p in params)
