"""Tensor substrate: the handful of differentiable ops the model uses, a
finite-difference gradient checker and labelled deterministic RNG streams.

Tensors and reverse-mode differentiation are torch's; everything the network
needs goes through the functions below so the op set stays small and
checkable.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Optional

import numpy as np
import torch

from .errors import DimensionError, EvaluationError, ValidationError

# Additive mask value for excluded keys. Finite so that masked logits never
# produce inf - inf.
MASK_NEG = -1e9

DTYPE = torch.float32


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[-1]}")
    return torch.nn.functional.linear(x, weight, bias)


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-6) -> torch.Tensor:
    return torch.nn.functional.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x, approximate="tanh")


def sigmoid_gate(a: torch.Tensor, b: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Convex blend ``sigmoid(alpha) * a + (1 - sigmoid(alpha)) * b``."""
    if a.shape != b.shape:
        raise DimensionError(f"gate operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    w = torch.sigmoid(alpha)
    return w * a + (1.0 - w) * b


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    heads: int = 1,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention.

    ``q`` is ``(..., S, C)``, ``k`` and ``v`` are ``(..., S', C)``. ``mask`` is
    additive and broadcastable to ``(..., S, S')`` with entries 0 or
    :data:`MASK_NEG`; a query whose keys are all masked gets a zero row.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise DimensionError("attention: q, k, v widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention: k and v sequence lengths differ")
    c = q.shape[-1]
    if c % heads:
        raise DimensionError(f"attention: width {c} not divisible by {heads} heads")
    d = c // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, d).transpose(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    if mask is not None:
        mask = mask.unsqueeze(-3).to(q.dtype)  # broadcast over heads
    out = torch.nn.functional.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask)
    if mask is not None:
        alive = (mask > MASK_NEG / 2).any(dim=-1, keepdim=True)
        out = out * alive.to(out.dtype)
    return out.transpose(-2, -3).reshape(*q.shape[:-1], c)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-4,
) -> float:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` to central differences.

    Runs in float64 so the comparison measures the derivative, not rounding;
    ``f`` must accept a float64 tensor (cast any module it closes over with
    ``.double()``). Returns ``max |g_fd - g_ad| / (|g_fd| + |g_ad| + 1e-8)``.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValidationError(f"eps must lie in [1e-5, 1e-3], got {eps}")
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not torch.isfinite(y).all():
        raise EvaluationError("f(x) is not finite")
    (g_ad,) = torch.autograd.grad(y, x)
    g_ad = g_ad.detach().reshape(-1)

    flat = x.detach().reshape(-1).clone()
    g_fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(flat.view_as(x)).item()
            flat[i] = orig - eps
            fm = f(flat.view_as(x)).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"f is not finite near element {i}")
            g_fd[i] = (fp - fm) / (2 * eps)
    rel = (g_fd - g_ad).abs() / (g_fd.abs() + g_ad.abs() + 1e-8)
    return float(rel.max()) if rel.numel() else 0.0


def rng_stream(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic generator keyed on ``(seed, stream_label)``.

    The label is folded in through SHA-256 so streams with different labels
    are independent, and PCG64 output is identical on every platform.
    """
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    seed_words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *words]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_words)))


def normal(rng: np.random.Generator, shape) -> torch.Tensor:
    """Standard normal float32 tensor drawn from a numpy stream."""
    return torch.from_numpy(rng.standard_normal(size=tuple(shape), dtype=np.float32))
