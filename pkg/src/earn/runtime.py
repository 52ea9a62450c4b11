"""Prefill / decode pipeline and fixed-length identifier generation."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError
from .kvcache import KvCache
from .model import (ModelConfig, RegisterSpec, Role, SequenceLayout, Weights, forward_earn,
                    layer_decode, run_layers)
from .numkernel import FlopCounter, matmul, rmsnorm

IDENT_LEN = 4


@dataclass
class Session:
    weights: Weights
    config: ModelConfig
    spec: RegisterSpec | None
    cache: KvCache
    layout: SequenceLayout
    logits: np.ndarray
    generated: list = field(default_factory=list)
    counter: FlopCounter = field(default_factory=FlopCounter)
    t_prefill: float = 0.0
    t_decode: float = 0.0
    traces: list = field(default_factory=list)

    @property
    def k(self):
        return self.config.num_layers if self.spec is None else self.spec.k


def _head(weights, config, x):
    return matmul(rmsnorm(x, weights["final_norm"], config.norm_eps), weights["head"])


def prefill(weights, config, spec, layout: SequenceLayout, counter=None, trace=False):
    """Run the prompt once, fill every layer's cache and return the session.

    ``spec=None`` is the unpruned (vanilla) model.
    """
    counter = counter if counter is not None else FlopCounter()
    t0 = time.perf_counter()
    if spec is None:
        res = run_layers(weights, config, layout.tokens, layout.roles, layout.positions,
                         counter=counter, trace=trace, last_only=True)
    else:
        res = forward_earn(weights, config, spec, layout, counter=counter, trace=trace, last_only=True)
    k = config.num_layers if spec is None else spec.k
    cache = KvCache(config, k, dtype=weights.dtype)
    for i, (keys, values, rows) in enumerate(res.kv):
        cache.layers[i].extend(keys, values, layout.roles[rows], layout.positions[rows])
    s = Session(weights, config, spec, cache, layout, res.logits[-1], counter=counter,
                traces=res.traces)
    s.t_prefill = time.perf_counter() - t0
    return s


def decode_step(session: Session, token_id):
    """Feed one generated token; returns the next-token logits."""
    t0 = time.perf_counter()
    w, cfg = session.weights, session.config
    layout = session.layout.append(token_id)
    if layout.positions[-1] >= cfg.max_positions:
        raise CapacityError(f"position {layout.positions[-1]} exceeds max_positions={cfg.max_positions}")
    pos = layout.positions[-1:]
    x = w.embedding_table()[[int(token_id)]]
    for i, c in enumerate(session.cache.layers):
        lo = layer_decode(w.layer(i), cfg, x, pos, [(c.keys, c.values)], session.counter)
        c.extend(lo.k, lo.v, [Role.GENERATED], pos)
        x = lo.out
    session.layout = layout
    session.generated.append(int(token_id))
    session.logits = _head(w, cfg, x)[-1]
    session.t_decode += time.perf_counter() - t0
    return session.logits


def generate_greedy(session: Session, steps=IDENT_LEN):
    """Argmax decoding; ties go to the smallest token id."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    out = []
    for _ in range(steps):
        tok = int(np.argmax(session.logits))
        out.append(tok)
        decode_step(session, tok)
    return tuple(out)


@dataclass
class GenerationResult:
    ranked: list                 # [(identifier tuple, total log-prob)], best first
    pairs_per_layer: list = field(default_factory=list)  # per hypothesis, after generation

    @property
    def identifiers(self):
        return [ident for ident, _ in self.ranked]


def log_softmax(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def generate_beam(weights, config, spec, layout: SequenceLayout, beam_width=20, steps=IDENT_LEN,
                  counter=None, session=None):
    """Fixed-length beam search over the full vocabulary.

    Hypotheses share the read-only prefill cache of unpruned layers and keep
    their own copy of the (register + generated) entries of pruned layers.
    Ranking is by total log-probability, ties by lexicographic token order.
    """
    if beam_width < 1:
        raise ContractError("beam_width must be >= 1")
    if session is None:
        session = prefill(weights, config, spec, layout, counter=counter)
    cfg, w = config, weights
    counter = session.counter
    table = w.embedding_table()
    # per layer: (shared K, shared V) and per-hypothesis (B, n_kv, t, d) branch arrays
    shared, branch = [], []
    for c in session.cache.layers:
        if c.pruned:
            shared.append(None)
            branch.append((c.keys[None].copy(), c.values[None].copy()))
        else:
            shared.append((c.keys, c.values))
            branch.append((c.keys[None, :, :0], c.values[None, :, :0]))
    seqs = [()]
    scores = np.zeros(1)
    logp = log_softmax(session.logits[None, :])
    next_pos = int(session.layout.positions[-1]) + 1
    V = logp.shape[-1]
    for t in range(steps):
        total = scores[:, None] + logp
        cand = [(-total[b, v], seqs[b] + (v,), b) for b in range(len(seqs)) for v in range(V)]
        cand.sort(key=lambda c: (c[0], c[1]))
        cand = cand[:beam_width]
        parents = np.array([c[2] for c in cand])
        seqs = [c[1] for c in cand]
        scores = np.array([-c[0] for c in cand])
        if t == steps - 1:
            break
        toks = np.array([s[-1] for s in seqs])
        x = table[toks][:, None, :]
        pos = np.array([next_pos + t])
        for i in range(cfg.num_layers):
            bk, bv = branch[i][0][parents], branch[i][1][parents]
            segs = ([shared[i]] if shared[i] is not None else []) + [(bk, bv)]
            lo = layer_decode(w.layer(i), cfg, x, pos, segs, counter)
            branch[i] = (np.concatenate([bk, lo.k], axis=-2), np.concatenate([bv, lo.v], axis=-2))
            x = lo.out
        logp = log_softmax(_head(w, cfg, x)[:, -1, :])
    pairs = [(0 if shared[i] is None else shared[i][0].shape[-2]) + branch[i][0].shape[-2]
             for i in range(cfg.num_layers)]
    return GenerationResult(list(zip(seqs, scores.tolist())), pairs)
