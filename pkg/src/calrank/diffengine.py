"""Differentiable tensor substrate.

All real-valued intermediates are plain ``torch.Tensor`` objects; torch's
reverse-mode autograd records the graph. This module fixes the small set of
primitives the rest of the package is allowed to use and provides an
independent central-difference checker for them.
"""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn.functional as F

_PRECISIONS = {"float64": torch.float64, "float32": torch.float32}
_dtype = torch.float64


def set_precision(name: str) -> torch.dtype:
    """Select the scalar type used for new tensors ("float64" or "float32")."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]
    return _dtype


def get_dtype() -> torch.dtype:
    return _dtype


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=_dtype, requires_grad=requires_grad)


def masked_softmax(logits: torch.Tensor, permit: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over the permitted entries only; forbidden entries come out as exact zeros."""
    permit = permit.to(torch.bool)
    if not bool(permit.any(dim=dim).all()):
        raise ValueError("empty attention row")
    masked = logits.masked_fill(~permit, float("-inf"))
    out = torch.softmax(masked, dim=dim)
    # softmax already yields 0 at -inf; the where() pins it against any
    # backend that returns -0.0 or denormals there.
    return torch.where(permit, out, torch.zeros((), dtype=out.dtype))


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return gain * (x - mean) / torch.sqrt(var + eps) + bias


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    # max(x, 0) + log1p(exp(-|x|)) never overflows
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def backprop(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.numel() != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def zero_grad(leaves) -> None:
    for leaf in leaves:
        leaf.grad = None


def finite_diff_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5) -> float:
    """Compare autograd against central differences at ``x``.

    Returns max_k |analytic_k - central_k| / (|analytic_k| + |central_k| + 1e-12).
    The numeric side is evaluated in float64 under ``no_grad`` so it never touches
    the recorded graph.
    """
    x0 = x.detach().to(torch.float64).clone()
    xa = x0.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if not torch.isfinite(out).all():
        raise ValueError("non-finite function value at the base point")
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out.reshape(()), xa, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(x0)
    else:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for k in range(flat.numel()):
            plus = flat.clone()
            plus[k] += step
            minus = flat.clone()
            minus[k] -= step
            fp = float(f(plus.reshape(x0.shape)))
            fm = float(f(minus.reshape(x0.shape)))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"non-finite function value when perturbing coordinate {k}")
            numeric[k] = (fp - fm) / (2 * step)

    rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
    return float(rel.max()) if rel.numel() else 0.0
