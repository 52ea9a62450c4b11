"""Slow float64 reference transformer written row by row, independent of earn.model.

Pruning semantics: above layer k a Prompt row neither computes nor serves as
a key; every other row keeps its absolute position.
"""
import math

import numpy as np

PROMPT = 1


def _rms(v, g, eps):
    return v / math.sqrt(float(np.mean(v * v)) + eps) * g


def _rotate(v, pos, base):
    out = v.copy()
    d = len(v)
    for i in range(d // 2):
        theta = pos * base ** (-2.0 * i / d)
        c, s = math.cos(theta), math.sin(theta)
        a, b = v[2 * i], v[2 * i + 1]
        out[2 * i] = a * c - b * s
        out[2 * i + 1] = a * s + b * c
    return out


def reference_forward(weights, config, tokens, roles, positions, k=None):
    """Returns (logits per retained row, retained row indices, per-layer hidden dicts)."""
    W = {n: np.asarray(a, dtype=np.float64) for n, a in weights.items()}
    table = np.concatenate([W["tok_emb"], W["prefix_reg"], W["suffix_reg"]])
    n_h, n_kv, d = config.num_heads, config.num_kv_heads, config.head_dim
    group = n_h // n_kv
    eps = config.norm_eps
    x = {i: table[t].copy() for i, t in enumerate(tokens)}
    hidden = []
    for layer in range(1, config.num_layers + 1):
        p = f"layers.{layer - 1}."
        active = [i for i in x if k is None or layer <= k or roles[i] != PROMPT]
        q, kk, vv = {}, {}, {}
        for i in active:
            h = _rms(x[i], W[p + "attn_norm"], eps)
            qi, ki, vi = h @ W[p + "wq"], h @ W[p + "wk"], h @ W[p + "wv"]
            q[i] = [_rotate(qi[j * d:(j + 1) * d], positions[i], config.rope_base) for j in range(n_h)]
            kk[i] = [_rotate(ki[j * d:(j + 1) * d], positions[i], config.rope_base) for j in range(n_kv)]
            vv[i] = [vi[j * d:(j + 1) * d] for j in range(n_kv)]
        new = {}
        for i in active:
            keys = [j for j in active if positions[j] <= positions[i]]
            heads = []
            for hh in range(n_h):
                kv = hh // group
                s = np.array([q[i][hh] @ kk[j][kv] for j in keys]) / math.sqrt(d)
                w = np.exp(s - s.max())
                w /= w.sum()
                heads.append(sum(wj * vv[j][kv] for wj, j in zip(w, keys)))
            x1 = x[i] + np.concatenate(heads) @ W[p + "wo"]
            u = _rms(x1, W[p + "ffn_norm"], eps) @ W[p + "w_up"]
            new[i] = x1 + (u / (1 + np.exp(-u))) @ W[p + "w_down"]
        x = new
        hidden.append(dict(x))
    rows = sorted(x)
    logits = np.array([_rms(x[i], W["final_norm"], eps) @ W["head"] for i in rows])
    return logits, rows, hidden


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))
