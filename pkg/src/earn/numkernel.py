"""Dense numeric kernels on numpy arrays.

Every kernel keeps the dtype of its inputs, so the same code serves the
float32 engine and the float64 gradient oracle.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError


class FlopCounter:
    """Accumulates matmul FLOPs (2·m·k·n per product) for one session."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)

    def reset(self):
        self.total = 0


def matmul(a, b, counter=None):
    """``a @ b`` with broadcasting over leading dims; counts 2·m·k·n per product."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    if counter is not None:
        counter.add(2 * out.size * a.shape[-1])
    return out


def softmax_rows(m, mask=None):
    """Row softmax over the last axis. ``mask`` is True where an entry is visible.

    Masked entries come out exactly 0.
    """
    if mask is not None:
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax row with every entry masked")
        m = np.where(mask, m, -np.inf)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm(x, gain, eps=1e-6):
    if x.shape[-1] != gain.shape[-1]:
        raise ContractError(f"rmsnorm length mismatch: {x.shape[-1]} vs {gain.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return (x * inv * gain).astype(x.dtype, copy=False)


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def rope_angles(positions, head_dim, base):
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}", "head_dim")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope_apply(x, positions, base=10000.0, inverse=False):
    """Rotate consecutive pairs (x[2i], x[2i+1]) of each row by pos·base^(-2i/d).

    ``x`` is (..., T, d) with one position per row. ``inverse`` applies the
    transpose rotation (used by the backward pass).
    """
    d = x.shape[-1]
    if len(positions) != x.shape[-2]:
        raise ContractError(f"{len(positions)} positions for {x.shape[-2]} rows")
    ang = rope_angles(positions, d, base)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def topk(scores, k):
    """Top ``k`` (index, value) pairs, descending by value, ties by ascending index."""
    scores = np.asarray(scores)
    if k > scores.shape[0]:
        raise ContractError(f"topk k={k} exceeds length {scores.shape[0]}")
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), scores[i].item()) for i in order]
