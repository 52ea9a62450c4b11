"""Reusable experiment drivers shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import dataclasses
import time

from .bench import run_bench
from .evaluation import evaluate
from .model import ModelConfig, RegisterSpec, init_weights
from .recdata import chronological_split, generate_synthetic, make_examples
from .trainer import TrainConfig, train

# recommendation model used for the learning-direction comparison
REC_MODEL = dict(num_layers=8, num_heads=4, num_kv_heads=4, head_dim=32, hidden_dim=128, ffn_dim=256)
# toy model for wall-clock speedup
BENCH_MODEL = ModelConfig(num_layers=16, num_heads=8, num_kv_heads=8, head_dim=32, hidden_dim=256,
                          ffn_dim=1024, vocab_size=64)


@dataclasses.dataclass
class DirectionResult:
    seed: int
    recall10: dict            # variant -> Recall@10 on the test split
    ndcg10: dict
    seconds: dict
    n_test: int


def learning_directions(seed, n_users=500, n_items=200, k=2, epochs=5, learning_rate=2e-3, history_len=8,
                        beam_width=20, log=print):
    """Train vanilla, EARN and EARN without suffix registers; evaluate those plus vanilla pruned at k.

    Variants: ``vanilla`` (full model), ``earn`` (trained with pruning at k),
    ``no_rt`` (vanilla weights, pruned at k at inference only), ``no_sr``
    (trained with pruning at k but without suffix registers).
    """
    interactions, catalog = generate_synthetic(n_users, n_items, seed=seed)
    tr, _, te = make_examples(chronological_split(interactions), catalog, history_len)
    cfg = ModelConfig(vocab_size=catalog.vocab.size, **REC_MODEL)
    tc = TrainConfig(learning_rate=learning_rate, epochs=epochs, micro_batch=64, effective_batch=128, seed=seed)
    full = RegisterSpec(1, 1, k)
    no_sr = RegisterSpec(1, 0, k)
    recall, ndcg, secs = {}, {}, {}

    def fit(name, spec, mode):
        t0 = time.perf_counter()
        w, rows = train(init_weights(cfg, spec, seed=seed), cfg, spec, tr, tc, mode)
        secs[name] = time.perf_counter() - t0
        log(f"seed {seed} {name}: final train loss {rows[-1]['loss']:.4f} ({secs[name]:.0f}s)")
        return w

    def score(name, w, spec, prune):
        res = evaluate(w, cfg, spec, te, catalog, ks=(10,), beam_width=beam_width, prune=prune)
        recall[name], ndcg[name] = res[10]
        log(f"seed {seed} {name}: Recall@10 {recall[name]:.4f} NDCG@10 {ndcg[name]:.4f}")

    w_vanilla = fit("vanilla", full, "vanilla")
    score("vanilla", w_vanilla, full, prune=False)
    score("no_rt", w_vanilla, full, prune=True)
    score("earn", fit("earn", full, "earn"), full, prune=True)
    score("no_sr", fit("no_sr", no_sr, "earn"), no_sr, prune=True)
    return DirectionResult(seed, recall, ndcg, secs, len(te))


def speedup_sweep(lengths=(1024, 2048, 4096), k=4, repeats=5, warmup=1, decode_steps=4,
                  methods=("vanilla", "earn"), seed=0, cut=None, window=(4, 64), log_fn=None):
    spec = RegisterSpec(1, 1, k)
    weights = init_weights(BENCH_MODEL, spec, seed=seed)
    return run_bench(weights, BENCH_MODEL, spec, methods=methods, lengths=lengths, decode_steps=decode_steps,
                     repeats=repeats, warmup=warmup, seed=seed, cut=cut, window=window, log_fn=log_fn)
