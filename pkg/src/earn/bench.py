"""Wall-clock efficiency harness: speedup, throughput, cache reduction, cache bytes.

Each method runs prefill + a fixed number of greedy decode steps on a batch
of independent sessions; timing is the median over repeats after warmup.
"""
from __future__ import annotations

import csv
import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .kvcache import LayerKvCache, cache_bytes
from .model import SequenceLayout, run_layers
from .runtime import decode_step, prefill

METHODS = ("vanilla", "earn", "skiplayers", "window")


@dataclass
class BenchResult:
    method: str
    batch: int
    length: int
    decode_steps: int
    omega: float = float("nan")
    tau: float = float("nan")          # committed new tokens per second
    gamma_pct: float = float("nan")    # % of cache pairs removed vs vanilla, after prefill
    sigma_bytes: int = 0               # live cache bytes after prefill, summed over the batch
    seconds: float = float("nan")      # median batch wall time
    spread: float = float("nan")       # IQR / median over repeats
    status: str = "ok"


def skiplayers_forward(weights, config, layout: SequenceLayout, cut):
    """Logits from the first ``cut`` layers followed by the final norm and head."""
    if not 1 <= cut <= config.num_layers:
        raise ValueError(f"cut must lie in [1, {config.num_layers}]")
    return run_layers(weights, config, layout.tokens, layout.roles, layout.positions, n_layers=cut).logits


def window_evict(session, n_initial, n_recent):
    """Keep only the first ``n_initial`` and last ``n_recent`` cached entries of every layer."""
    if n_initial + n_recent < 1:
        raise ValueError("window must keep at least one entry")
    for i, c in enumerate(session.cache.layers):
        n = len(c)
        if n_initial + n_recent >= n:
            continue
        idx = np.r_[0:n_initial, n - n_recent:n] if n_recent else np.arange(n_initial)
        fresh = LayerKvCache(c.layer, c.keys.shape[0], c.keys.shape[2], c.pruned, c.keys.dtype, len(idx))
        fresh.extend(c.keys[:, idx], c.values[:, idx], c.roles[idx], c.positions[idx])
        session.cache.layers[i] = fresh
    return session


def window_cache_decode(weights, config, layout, n_initial, n_recent, counter=None):
    """Unmodified prefill, then a cache restricted to initial + recent entries for decoding."""
    return window_evict(prefill(weights, config, None, layout, counter=counter), n_initial, n_recent)


def start_session(method, weights, config, spec, layout, window=(4, 64), cut=None):
    if method == "vanilla":
        return prefill(weights, config, None, layout)
    if method == "earn":
        return prefill(weights, config, spec, layout)
    if method == "skiplayers":
        cfg = dataclasses.replace(config, num_layers=cut or spec.k)
        return prefill(weights, cfg, None, layout)
    if method == "window":
        return window_cache_decode(weights, config, layout, *window)
    raise ValueError(f"unknown method {method!r}")


def run_one(method, weights, config, spec, layout, decode_steps, **kw):
    s = start_session(method, weights, config, spec, layout, **kw)
    pairs = s.cache.stats().total_pairs
    for _ in range(decode_steps):
        decode_step(s, int(np.argmax(s.logits)))
    return pairs


def padded_layouts(config, spec, batch, length, seed):
    """``batch`` random prompts so each input (registers included) is ``length`` tokens."""
    rng = np.random.default_rng(seed)
    n_prompt = length - spec.r
    return [SequenceLayout.build(rng.integers(0, config.vocab_size, n_prompt), spec.n_prefix,
                                 spec.n_suffix, config.vocab_size) for _ in range(batch)]


def _run_batch(method, weights, config, spec, layouts, decode_steps, workers, kw):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda lay: run_one(method, weights, config, spec, lay, decode_steps, **kw),
                               layouts))
    return [run_one(method, weights, config, spec, lay, decode_steps, **kw) for lay in layouts]


def run_bench(weights, config, spec, methods=("vanilla", "earn"), batch_sizes=(1,), lengths=(1024,),
              decode_steps=4, repeats=5, warmup=2, seed=0, workers=1, window=(4, 64), cut=None,
              element_bytes=4, log_fn=None):
    """One BenchResult per (method, batch, length). Vanilla always runs as the reference."""
    methods = list(methods)
    if not methods or not batch_sizes or not lengths:
        raise ValueError("need at least one method, batch size and length")
    order = ["vanilla"] + [m for m in methods if m != "vanilla"]
    kw = {"window": tuple(window), "cut": cut}
    results = []
    for batch in batch_sizes:
        for length in lengths:
            layouts = padded_layouts(config, spec, batch, length, seed)
            ref = {}
            for method in order:
                res = BenchResult(method, batch, length, decode_steps)
                try:
                    for _ in range(warmup):
                        _run_batch(method, weights, config, spec, layouts, decode_steps, workers, kw)
                    times = []
                    for _ in range(repeats):
                        t0 = time.perf_counter()
                        pairs = _run_batch(method, weights, config, spec, layouts, decode_steps, workers, kw)
                        times.append(time.perf_counter() - t0)
                except MemoryError:
                    res.status = "oom"
                    if method == "vanilla":
                        ref = {}
                    if method in methods:
                        results.append(res)
                    continue
                med = float(np.median(times))
                q1, q3 = np.percentile(times, [25, 75])
                res.seconds = med
                res.spread = float((q3 - q1) / med) if med > 0 else 0.0
                total_pairs = sum(pairs)
                res.sigma_bytes = cache_bytes(total_pairs, config.num_kv_heads, config.head_dim, element_bytes)
                res.tau = batch * decode_steps / med
                if method == "vanilla":
                    ref = {"seconds": med, "pairs": total_pairs}
                if ref:
                    res.omega = ref["seconds"] / med
                    res.gamma_pct = 100.0 * (1.0 - total_pairs / ref["pairs"])
                if res.spread >= 0.2:
                    res.status = "unstable"
                if log_fn:
                    log_fn(res)
                if method in methods:
                    results.append(res)
    return results


BENCH_COLUMNS = ["method", "batch", "length", "omega", "tau_tokens_per_s", "gamma_pct", "sigma_bytes", "status"]


def write_bench_csv(results, path, long_path=None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_COLUMNS)
        for r in results:
            w.writerow([r.method, r.batch, r.length, f"{r.omega:.4f}", f"{r.tau:.4f}", f"{r.gamma_pct:.4f}",
                        r.sigma_bytes, r.status])
    if long_path:
        with open(long_path, "w") as f:
            f.write("# method batch length metric value\n")
            for r in results:
                for metric, val in (("omega", r.omega), ("tau", r.tau), ("gamma_pct", r.gamma_pct),
                                    ("sigma_bytes", r.sigma_bytes)):
                    f.write(f"{r.method} {r.batch} {r.length} {metric} {val}\n")
