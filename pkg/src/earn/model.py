"""Decoder-only transformer with prefix/suffix registers and prompt pruning.

Layer indices in the public API are 1-based (layer 1 .. N) to match the
register-depth knob ``k``: layers 1..k see every token, layers k+1..N only
see register and generated tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CapacityError, ConfigError, ContractError
from .numkernel import matmul, rmsnorm, rope_apply, silu, softmax_rows


class Role(IntEnum):
    PREFIX = 0
    PROMPT = 1
    SUFFIX = 2
    GENERATED = 3


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    num_kv_heads: int = 4
    head_dim: int = 16
    hidden_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 64
    rope_base: float = 10000.0
    max_positions: int = 8192
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "num_kv_heads", "head_dim",
                     "hidden_dim", "ffn_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.num_heads * self.head_dim != self.hidden_dim:
            raise ConfigError(
                f"num_heads*head_dim={self.num_heads * self.head_dim} != hidden_dim={self.hidden_dim}",
                "hidden_dim")
        if self.num_heads % self.num_kv_heads:
            raise ConfigError("must divide num_heads", "num_kv_heads")
        if self.head_dim % 2:
            raise ConfigError("must be even for rotary embedding", "head_dim")

    @property
    def group(self):
        return self.num_heads // self.num_kv_heads


@dataclass(frozen=True)
class RegisterSpec:
    n_prefix: int = 1
    n_suffix: int = 1
    k: int = 1

    def __post_init__(self):
        if self.n_prefix < 0:
            raise ConfigError("must be >= 0", "n_prefix")
        if self.n_suffix < 0:
            raise ConfigError("must be >= 0", "n_suffix")
        if self.k < 1:
            raise ConfigError("must be >= 1", "k")

    @property
    def r(self):
        return self.n_prefix + self.n_suffix

    def check(self, config: ModelConfig):
        if self.k > config.num_layers:
            raise ConfigError(f"k={self.k} exceeds num_layers={config.num_layers}", "k")
        return self

    @classmethod
    def default_for(cls, config: ModelConfig):
        return cls(1, 1, max(1, math.ceil(config.num_layers / 4)))


@dataclass
class SequenceLayout:
    tokens: np.ndarray
    roles: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int8)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = len(self.tokens)
        if len(self.roles) != n or len(self.positions) != n:
            raise ContractError("tokens, roles and positions differ in length")
        if n and np.any(np.diff(self.roles) < 0):
            raise ContractError("roles out of block order prefix, prompt, suffix, generated")
        if n and np.any(np.diff(self.positions) != 1):
            raise ContractError("positions must increase by exactly 1")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, prompt, n_prefix, n_suffix, vocab_size, generated=(), start=0):
        """Prefix registers, prompt, suffix registers, generated tokens.

        Registers get virtual ids ``vocab_size + i`` (prefix first), which
        index straight into the extended embedding table.
        """
        prompt = [int(t) for t in prompt]
        if any(t < 0 or t >= vocab_size for t in prompt):
            raise ContractError("prompt token outside vocabulary")
        tokens = (list(range(vocab_size, vocab_size + n_prefix)) + prompt
                  + list(range(vocab_size + n_prefix, vocab_size + n_prefix + n_suffix))
                  + [int(t) for t in generated])
        roles = ([Role.PREFIX] * n_prefix + [Role.PROMPT] * len(prompt)
                 + [Role.SUFFIX] * n_suffix + [Role.GENERATED] * len(generated))
        return cls(tokens, roles, np.arange(start, start + len(tokens)))

    def append(self, token):
        nxt = self.positions[-1] + 1 if len(self) else 0
        return SequenceLayout(np.append(self.tokens, token), np.append(self.roles, Role.GENERATED),
                              np.append(self.positions, nxt))

    @property
    def n_generated(self):
        return int(np.sum(self.roles == Role.GENERATED))


class Weights:
    """Flat name -> array store. Layer tensors are ``layers.{i}.{name}`` (0-based i)."""

    LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_down")

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def layer(self, i):
        return {key: self.tensors[f"layers.{i}.{key}"] for key in self.LAYER_KEYS}

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def astype(self, dtype):
        return Weights({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return Weights({k: v.copy() for k, v in self.tensors.items()})

    def embedding_table(self):
        return np.concatenate([self["tok_emb"], self["prefix_reg"], self["suffix_reg"]], axis=0)

    def check(self, config: ModelConfig, spec: RegisterSpec):
        for name, shape in weight_shapes(config, spec).items():
            if name not in self.tensors:
                raise ContractError(f"missing tensor {name}")
            if self.tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {self.tensors[name].shape} != {shape}")
        return self


def weight_shapes(config: ModelConfig, spec: RegisterSpec):
    d, V = config.hidden_dim, config.vocab_size
    qd = config.num_heads * config.head_dim
    kvd = config.num_kv_heads * config.head_dim
    shapes = {"tok_emb": (V, d), "prefix_reg": (spec.n_prefix, d), "suffix_reg": (spec.n_suffix, d)}
    for i in range(config.num_layers):
        shapes.update({
            f"layers.{i}.attn_norm": (d,),
            f"layers.{i}.wq": (d, qd),
            f"layers.{i}.wk": (d, kvd),
            f"layers.{i}.wv": (d, kvd),
            f"layers.{i}.wo": (qd, d),
            f"layers.{i}.ffn_norm": (d,),
            f"layers.{i}.w_up": (d, config.ffn_dim),
            f"layers.{i}.w_down": (config.ffn_dim, d),
        })
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, V)
    return shapes


def init_weights(config: ModelConfig, spec: RegisterSpec, seed=0, dtype=np.float32):
    """Uniform init with std 1/sqrt(fan_in) for projections, unit std for embeddings."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in weight_shapes(config, spec).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=dtype)
            continue
        if name in ("tok_emb", "prefix_reg", "suffix_reg"):
            bound = math.sqrt(3.0)
        else:
            bound = math.sqrt(3.0 / shape[0])
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Weights(tensors)


def attention_visibility(layer, query_role, key_role, query_pos, key_pos, k):
    """Whether a query may attend to a key at ``layer`` (1-based). Broadcasts over arrays."""
    causal = np.asarray(key_pos) <= np.asarray(query_pos)
    keep = (layer <= k) | (np.asarray(key_role) != Role.PROMPT)
    out = causal & keep
    return bool(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# layer forward

ATTN_CHUNK_ELEMS = 1 << 24


def _split_heads(x, n, d_a):
    # (..., T, n*d_a) -> (..., n, T, d_a)
    return np.swapaxes(x.reshape(*x.shape[:-1], n, d_a), -2, -3)


def attend(q, k, v, mask, scale, counter=None, keep=False):
    """Grouped attention. q: (..., n_kv, g, T, d), k/v: (..., n_kv, Tk, d), mask: (T, Tk).

    Returns (output, probs); probs is None unless ``keep`` and the query is
    processed in one chunk.
    """
    kt = np.swapaxes(k, -1, -2)[..., None, :, :]
    vv = v[..., None, :, :]
    T, Tk = q.shape[-2], k.shape[-2]
    per_row = Tk * q.shape[-3] * q.shape[-4] * int(np.prod(q.shape[:-4], dtype=np.int64))
    chunk = T if keep else max(1, ATTN_CHUNK_ELEMS // max(per_row, 1))
    if chunk >= T:
        scores = matmul(q, kt, counter) * scale
        p = softmax_rows(scores, mask)
        return matmul(p, vv, counter), p
    outs = []
    for s in range(0, T, chunk):
        scores = matmul(q[..., s:s + chunk, :], kt, counter) * scale
        p = softmax_rows(scores, mask[s:s + chunk])
        outs.append(matmul(p, vv, counter))
    return np.concatenate(outs, axis=-2), None


@dataclass
class LayerOutput:
    out: np.ndarray
    k: np.ndarray  # new keys after rotary, (..., n_kv, T, d_a)
    v: np.ndarray
    probs: np.ndarray | None = None  # (..., n_kv, g, T, Tk)
    acts: dict | None = None


def _project_qkv(lw, config, x, pos, counter):
    n_h, n_kv, d_a = config.num_heads, config.num_kv_heads, config.head_dim
    h = rmsnorm(x, lw["attn_norm"], config.norm_eps)
    q = _split_heads(matmul(h, lw["wq"], counter), n_h, d_a)
    k = _split_heads(matmul(h, lw["wk"], counter), n_kv, d_a)
    v = _split_heads(matmul(h, lw["wv"], counter), n_kv, d_a)
    q = rope_apply(q, pos, config.rope_base)
    k = rope_apply(k, pos, config.rope_base)
    # group query heads under their kv head: (..., n_kv, g, T, d_a)
    q = q.reshape(*q.shape[:-3], n_kv, config.group, q.shape[-2], d_a)
    return h, q, k, v


def _merge_heads(o, config):
    T = o.shape[-2]
    o = o.reshape(*o.shape[:-4], config.num_heads, T, config.head_dim)
    return np.moveaxis(o, -3, -2).reshape(*o.shape[:-3], T, config.num_heads * config.head_dim)


def _finish(lw, config, x, o_flat, counter):
    x1 = x + matmul(o_flat, lw["wo"], counter)
    h2 = rmsnorm(x1, lw["ffn_norm"], config.norm_eps)
    u = matmul(h2, lw["w_up"], counter)
    a = silu(u)
    return x1 + matmul(a, lw["w_down"], counter), (x1, h2, u, a)


def _scale(config, dtype):
    return np.asarray(1.0 / math.sqrt(config.head_dim), dtype=dtype)


def layer_forward(lw, config: ModelConfig, x, pos, mask=None, counter=None, keep=False,
                  want_probs=False):
    """One pre-norm decoder block over rows ``x`` (..., T, d) at absolute ``pos``.

    Without ``mask`` attention is causal by position. ``keep`` stores the
    activations the backward pass needs.
    """
    pos = np.asarray(pos)
    h, q, k, v = _project_qkv(lw, config, x, pos, counter)
    if mask is None:
        mask = pos[None, :] <= pos[:, None]
    o, p = attend(q, k, v, mask, _scale(config, x.dtype), counter, keep=keep or want_probs)
    o_flat = _merge_heads(o, config)
    out, (x1, h2, u, a) = _finish(lw, config, x, o_flat, counter)
    acts = None
    if keep:
        acts = dict(x=x, h=h, q=q, K=k, V=v, p=p, o=o_flat, x1=x1, h2=h2, u=u, a=a,
                    pos=pos, mask=mask)
    return LayerOutput(out, k, v, p if want_probs else None, acts)


def layer_decode(lw, config: ModelConfig, x, pos, segments, counter=None, want_probs=False):
    """Block for new rows ``x`` (..., 1, d) attending to cached key/value segments.

    ``segments`` is a list of (K, V) pairs, each broadcastable to
    (..., n_kv, S, d_a) and already rotated; the new token's own key is
    appended as a final segment. Every cached entry precedes ``pos``, so no
    mask is needed.
    """
    pos = np.asarray(pos)
    h, q, k, v = _project_qkv(lw, config, x, pos, counter)
    segs = [s for s in segments if s[0].shape[-2]] + [(k, v)]
    scale = _scale(config, x.dtype)
    scores = [matmul(q, np.swapaxes(K, -1, -2)[..., None, :, :], counter) * scale for K, _ in segs]
    widths = [s.shape[-1] for s in scores]
    shape = np.broadcast_shapes(*[s.shape[:-1] for s in scores])
    p = softmax_rows(np.concatenate([np.broadcast_to(s, shape + s.shape[-1:]) for s in scores], axis=-1))
    o = None
    start = 0
    for (K, V), w in zip(segs, widths):
        part = matmul(p[..., start:start + w], V[..., None, :, :], counter)
        o = part if o is None else o + part
        start += w
    out, _ = _finish(lw, config, x, _merge_heads(o, config), counter)
    return LayerOutput(out, k, v, p if want_probs else None)


# ---------------------------------------------------------------------------
# full-sequence forward passes

@dataclass
class ForwardResult:
    logits: np.ndarray            # (..., len(rows) or 1, V)
    hidden: list                  # hidden[0] = embeddings, hidden[l] = output of layer l
    rows: np.ndarray              # layout indices of the final rows
    kv: list = field(default_factory=list)        # per layer (keys, values, layout rows)
    traces: list = field(default_factory=list)    # per layer probs (n_h, T, Tk) when requested
    layer_flops: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    final: dict | None = None


def _check_capacity(config, n):
    if n > config.max_positions:
        raise CapacityError(f"sequence of {n} tokens exceeds max_positions={config.max_positions}")


def run_layers(weights: Weights, config: ModelConfig, tokens, roles, positions, prune_k=None,
               oracle_k=None, counter=None, trace=False, keep=False, last_only=False,
               n_layers=None, tail=None):
    """Shared forward. ``tokens`` is (T,) or (B, T); roles/positions are (T,).

    ``prune_k`` drops Prompt rows after layer ``prune_k`` (physically).
    ``oracle_k`` instead keeps every row and masks Prompt keys above that layer.
    ``tail`` (or ``last_only``) limits the logits to the final rows.
    """
    roles = np.asarray(roles)
    positions = np.asarray(positions)
    _check_capacity(config, int(positions[-1]) + 1 if len(positions) else 0)
    x = weights.embedding_table()[np.asarray(tokens)]
    rows = np.arange(len(roles))
    res = ForwardResult(None, [x], rows)
    N = config.num_layers if n_layers is None else n_layers
    for i in range(N):
        if prune_k is not None and i == prune_k:
            keep_rows = np.flatnonzero(roles != Role.PROMPT)
            if keep_rows.size == 0:
                raise ContractError("pruning would leave no rows: add registers or generated tokens")
            x = x[..., keep_rows, :]
            rows, roles, positions = rows[keep_rows], roles[keep_rows], positions[keep_rows]
        mask = None
        if oracle_k is not None and i >= oracle_k:
            vis = attention_visibility(i + 1, roles[:, None], roles[None, :],
                                       positions[:, None], positions[None, :], oracle_k)
            causal = positions[None, :] <= positions[:, None]
            mask = np.where((roles == Role.PROMPT)[:, None], causal, vis)
        before = counter.total if counter is not None else 0
        lo = layer_forward(weights.layer(i), config, x, positions, mask=mask, counter=counter,
                           keep=keep, want_probs=bool(trace))
        if counter is not None:
            res.layer_flops.append(counter.total - before)
        x = lo.out
        res.hidden.append(x)
        res.kv.append((lo.k, lo.v, rows))
        if trace:
            p = lo.probs
            p = p.reshape(*p.shape[:-4], config.num_heads, p.shape[-2], p.shape[-1])
            res.traces.append(p[..., -1:, :] if trace == "last" else p)
        if keep:
            res.acts.append(lo.acts)
    res.rows = rows
    tail = 1 if last_only else tail
    xf = x[..., -tail:, :] if tail else x
    hf = rmsnorm(xf, weights["final_norm"], config.norm_eps)
    res.logits = matmul(hf, weights["head"])
    if keep:
        res.final = dict(x=xf, h=hf)
    return res


def forward_vanilla(weights, config, layout: SequenceLayout, counter=None, trace=False, last_only=False):
    return run_layers(weights, config, layout.tokens, layout.roles, layout.positions,
                      counter=counter, trace=trace, last_only=last_only)


def forward_earn(weights, config, spec: RegisterSpec, layout: SequenceLayout, counter=None,
                 trace=False, last_only=False):
    """Forward with Prompt rows removed after layer ``spec.k``.

    ``result.rows`` maps each logits row back to its layout index.
    """
    spec.check(config)
    prune = spec.k if spec.k < config.num_layers else None
    return run_layers(weights, config, layout.tokens, layout.roles, layout.positions,
                      prune_k=prune, counter=counter, trace=trace, last_only=last_only)


def forward_masked_oracle(weights, config, spec: RegisterSpec, layout: SequenceLayout):
    """Full-width forward masking Prompt keys above layer k; keeps every row.

    Test oracle for the pruned path: restricted to non-Prompt rows its
    outputs above layer k must match ``forward_earn``.
    """
    spec.check(config)
    return run_layers(weights, config, layout.tokens, layout.roles, layout.positions,
                      oracle_k=spec.k)
