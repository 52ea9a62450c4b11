import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from earn.errors import DataError
from earn.recdata import (Catalog, Interaction, InteractionLog, Vocab, build_prompt, chronological_split,
                          generate_synthetic, ingest, make_examples, ndcg_at_k, read_catalog, recall_at_k,
                          split_sizes, synthetic_codebook, write_catalog, write_log, write_metric_report)


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(300, 120, seed=9)


def test_same_seed_same_data(synth):
    log, cat = generate_synthetic(300, 120, seed=9)
    assert log.records == synth[0].records and cat.idents == synth[1].idents
    assert generate_synthetic(300, 120, seed=10)[0].records != log.records


def test_identifiers_unique_and_in_vocab(synth):
    _, cat = synth
    idents = list(cat.idents.values())
    assert all(len(i) == 4 for i in idents) and len(set(idents)) == len(idents)
    assert all(cat.vocab.is_ident_token(t) for i in idents for t in i)
    assert cat.vocab.size == 1 + 4 + 4 * synthetic_codebook(120, 8)
    assert all(cat.item_of(i) == item for item, i in cat.idents.items())


def test_within_cluster_rate_within_three_sigma():
    log, cat = generate_synthetic(2000, 200, seed=3, p_within=0.8)
    by_user = {}
    for r in log:
        by_user.setdefault(r.user, []).append(r.item)
    same = n = 0
    for items in by_user.values():
        for a, b in zip(items, items[1:]):
            n += 1
            same += cat.clusters[a] == cat.clusters[b]
    sigma = math.sqrt(0.8 * 0.2 / n)
    assert abs(same / n - 0.8) <= 3 * sigma, (same / n, n)


def test_log_round_trip(tmp_path, synth):
    log, cat = synth
    write_log(log, tmp_path / "log.jsonl")
    assert ingest(tmp_path / "log.jsonl").records == log.records
    write_catalog(cat, tmp_path / "cat.jsonl")
    assert read_catalog(tmp_path / "cat.jsonl", cat.vocab).idents == cat.idents


@pytest.mark.parametrize("bad", ['{"user": "a", "item": 1}', 'not json', '{"user": 1, "item": 1, "ts": 2}',
                                 '{"user": "a", "item": 1.5, "ts": 2}'])
def test_ingest_names_bad_line(tmp_path, bad):
    p = tmp_path / "log.jsonl"
    good = json.dumps({"user": "a", "item": 1, "ts": 5})
    p.write_text("\n".join([good, good, bad, good]) + "\n")
    with pytest.raises(DataError, match="line 3") as e:
        ingest(p)
    assert e.value.line == 3


def test_out_of_order_timestamps_sorted_downstream(tmp_path):
    p = tmp_path / "log.jsonl"
    rows = [("a", 1, 30), ("b", 2, 10), ("a", 3, 20)]
    p.write_text("".join(json.dumps({"user": u, "item": i, "ts": t}) + "\n" for u, i, t in rows))
    log = ingest(p)
    assert [r.ts for r in log] == [30, 10, 20]
    assert [r.ts for r in log.sorted()] == [10, 20, 30]


def test_split_sizes():
    assert split_sizes(10) == (8, 1, 1)
    assert split_sizes(9) == (7, 1, 1)
    assert split_sizes(100) == (80, 10, 10)
    assert split_sizes(2) == (2, 0, 0)


@given(st.integers(1, 10_000))
def test_split_sizes_partition(n):
    tr, va, te = split_sizes(n)
    assert tr + va + te == n and va == te and tr >= va


def test_split_is_chronological(synth):
    split = chronological_split(synth[0])
    assert max(r.ts for r in split.train) <= min(r.ts for r in split.test)
    assert max(r.ts for r in split.valid) <= min(r.ts for r in split.test)


def test_examples_use_only_earlier_history(synth):
    log, cat = synth
    split = chronological_split(log)
    tr, va, te = make_examples(split, cat, history_len=8)
    assert len({e.user for e in te}) == len(te)
    ordered = split.train + split.valid + split.test
    for ex in te[:20]:
        idx = max(i for i, r in enumerate(ordered) if r.user == ex.user)
        assert idx >= len(split.train) + len(split.valid)
        assert ordered[idx].item == ex.item
        hist = [r.item for r in ordered[:idx] if r.user == ex.user][-8:]
        body = [t for item in hist for t in cat.idents[item]]
        assert list(ex.prompt[4 + 32 - len(body):]) == body
    assert all(len(e.prompt) == 4 + 32 and len(e.target) == 4 for e in tr + va + te)


def test_build_prompt_pads_on_the_left():
    vocab = Vocab(n_task=2, codebook=3)
    cat = Catalog({7: (3, 6, 9, 12)}, vocab)
    assert build_prompt([7], cat, 2) == (1, 2, 0, 0, 0, 0, 3, 6, 9, 12)


def test_metrics_hand_cases():
    assert recall_at_k([[5, 1, 2]], [5], 10) == 1.0
    assert ndcg_at_k([[5, 1, 2]], [5], 10) == 1.0
    assert ndcg_at_k([[1, 2, 5]], [5], 10) == 0.5
    assert recall_at_k([[1, 2, 5]], [5], 2) == 0.0 and ndcg_at_k([[1, 2, 5]], [5], 2) == 0.0
    assert recall_at_k([[1], [2]], [1, 3], 5) == 0.5


@given(st.lists(st.permutations(list(range(30))), min_size=1, max_size=5), st.data())
def test_recall_monotone_in_k(ranked, data):
    truth = data.draw(st.lists(st.integers(0, 40), min_size=len(ranked), max_size=len(ranked)))
    assert recall_at_k(ranked, truth, 20) >= recall_at_k(ranked, truth, 10)
    assert ndcg_at_k(ranked, truth, 10) <= recall_at_k(ranked, truth, 10)


def test_metric_report_format(tmp_path):
    write_metric_report([("earn", 10, 0.5, 0.25)], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "method,K,recall,ndcg\nearn,10,0.500000,0.250000\n"


def test_interaction_log_iterates():
    log = InteractionLog([Interaction("u", 1, 2)])
    assert len(log) == 1 and list(log)[0].item == 1
