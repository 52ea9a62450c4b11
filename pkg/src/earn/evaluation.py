"""Beam-search ranking of catalog items and Recall/NDCG over example sets."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from .model import RegisterSpec, SequenceLayout
from .recdata import ndcg_at_k, recall_at_k
from .runtime import IDENT_LEN, generate_beam


def layout_for(example, spec: RegisterSpec, vocab_size):
    return SequenceLayout.build(example.prompt, spec.n_prefix, spec.n_suffix, vocab_size)


def rank_items(weights, config, spec, example, catalog, beam_width=20, prune=True):
    """Beam outputs mapped to catalog items; identifiers not in the catalog are skipped."""
    run_spec = spec if prune else None
    res = generate_beam(weights, config, run_spec, layout_for(example, spec, config.vocab_size),
                        beam_width=beam_width, steps=IDENT_LEN)
    items = []
    for ident, _ in res.ranked:
        item = catalog.item_of(ident)
        if item is not None and item not in items:
            items.append(item)
    return items


def evaluate(weights, config, spec, examples, catalog, ks=(10, 20), beam_width=20, prune=True, workers=1):
    """{K: (recall, ndcg)} with the pruned path unless ``prune`` is False."""
    def rank(ex):
        return rank_items(weights, config, spec, ex, catalog, beam_width, prune)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            ranked = list(ex.map(rank, examples))
    else:
        ranked = [rank(ex) for ex in examples]
    truth = [ex.item for ex in examples]
    return {K: (recall_at_k(ranked, truth, K), ndcg_at_k(ranked, truth, K)) for K in ks}
