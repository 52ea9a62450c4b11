import csv

import numpy as np
import pytest

from conftest import random_layout, tiny_config
from earn import bench
from earn.bench import (padded_layouts, run_bench, skiplayers_forward, start_session, window_cache_decode,
                        write_bench_csv)
from earn.costmodel import flops_layer
from earn.kvcache import reduction_ratio
from earn.model import RegisterSpec, forward_vanilla, init_weights, run_layers
from earn.numkernel import FlopCounter
from earn.runtime import decode_step, prefill


@pytest.fixture
def mha():
    cfg = tiny_config(num_kv_heads=4)
    spec = RegisterSpec(1, 1, 1)
    return cfg, spec, init_weights(cfg, spec, seed=8)


def test_skiplayers_full_cut_is_vanilla(mha, rng):
    cfg, spec, w = mha
    lay = random_layout(rng, cfg, spec, 9)
    assert np.array_equal(skiplayers_forward(w, cfg, lay, cfg.num_layers), forward_vanilla(w, cfg, lay).logits)
    with pytest.raises(ValueError):
        skiplayers_forward(w, cfg, lay, 0)


def test_skiplayers_flops_and_cache(mha, rng):
    cfg, spec, w = mha
    lay = random_layout(rng, cfg, spec, 9)
    c = FlopCounter()
    res = run_layers(w, cfg, lay.tokens, lay.roles, lay.positions, counter=c, n_layers=2)
    assert sum(res.layer_flops) == 2 * flops_layer(len(lay), cfg)
    assert sum(res.layer_flops) / (cfg.num_layers * flops_layer(len(lay), cfg)) == 2 / cfg.num_layers
    s = start_session("skiplayers", w, cfg, spec, lay, cut=2)
    assert s.cache.stats().total_pairs == 2 * len(lay)


def test_wide_window_is_vanilla(mha, rng):
    cfg, spec, w = mha
    lay = random_layout(rng, cfg, spec, 9)
    a = window_cache_decode(w, cfg, lay, 4, len(lay))
    b = prefill(w, cfg, None, lay)
    for tok in (1, 2):
        assert np.array_equal(decode_step(a, tok), decode_step(b, tok))


def test_window_pairs_per_step(mha, rng):
    cfg, spec, w = mha
    lay = random_layout(rng, cfg, spec, 30)
    s = window_cache_decode(w, cfg, lay, 2, 5)
    for g in range(3):
        assert s.cache.stats().pairs_per_layer == [min(2 + 5 + g, len(lay) + g)] * cfg.num_layers
        decode_step(s, 1)
    with pytest.raises(ValueError):
        window_cache_decode(w, cfg, lay, 0, 0)


def test_window_reduction_grows_with_length(mha):
    cfg, spec, w = mha
    gammas = []
    for L in (16, 32, 64):
        lay = padded_layouts(cfg, spec, 1, L, 0)[0]
        pairs = start_session("window", w, cfg, spec, lay, window=(2, 6)).cache.stats().total_pairs
        gammas.append(1 - pairs / (cfg.num_layers * L))
    assert gammas == sorted(gammas) and gammas[0] < gammas[-1]
    assert gammas[-1] == pytest.approx(1 - 8 / 64)


def test_run_bench_rows_and_reduction(mha, tmp_path):
    cfg, spec, w = mha
    res = run_bench(w, cfg, spec, methods=["vanilla", "earn", "skiplayers", "window"], lengths=[24],
                    batch_sizes=[2], decode_steps=2, repeats=2, warmup=0, cut=2, window=(2, 4))
    by = {r.method: r for r in res}
    assert by["vanilla"].omega == 1.0 and by["vanilla"].gamma_pct == 0.0
    assert by["earn"].gamma_pct == pytest.approx(100 * reduction_ratio(cfg.num_layers, spec.k, 24, spec.r),
                                                 abs=1e-12)
    assert by["earn"].sigma_bytes == 2 * (spec.k * 24 + 3 * spec.r) * cfg.num_kv_heads * cfg.head_dim * 2 * 4
    assert all(r.tau > 0 for r in res)
    write_bench_csv(res, tmp_path / "b.csv", tmp_path / "b.txt")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [r["method"] for r in rows] == ["vanilla", "earn", "skiplayers", "window"]
    assert len((tmp_path / "b.txt").read_text().splitlines()) == 1 + 4 * 4


def test_workers_give_same_pairs(mha):
    cfg, spec, w = mha
    a = run_bench(w, cfg, spec, lengths=[20], batch_sizes=[3], repeats=1, warmup=0, workers=1)
    b = run_bench(w, cfg, spec, lengths=[20], batch_sizes=[3], repeats=1, warmup=0, workers=3)
    assert [r.sigma_bytes for r in a] == [r.sigma_bytes for r in b]


def test_out_of_memory_becomes_a_row(mha, monkeypatch):
    cfg, spec, w = mha

    def boom(*a, **k):
        raise MemoryError

    monkeypatch.setattr(bench, "run_one", boom)
    res = run_bench(w, cfg, spec, methods=["vanilla", "earn"], lengths=[16], repeats=1, warmup=0)
    assert [r.status for r in res] == ["oom", "oom"]


def test_run_bench_argument_checks(mha):
    cfg, spec, w = mha
    with pytest.raises(ValueError):
        run_bench(w, cfg, spec, methods=[])
    with pytest.raises(ValueError):
        start_session("magic", w, cfg, spec, padded_layouts(cfg, spec, 1, 8, 0)[0])
