"""Sparsity and head/tail sink measures over captured attention distributions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

HEAD_WINDOW = 3
TAIL_WINDOW = 3


def _dist(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError("need a non-empty 1-d distribution")
    return p


def sparsity(p, epsilon=0.05):
    """Fraction of entries strictly above ``epsilon``."""
    p = _dist(p)
    return float(np.count_nonzero(p > epsilon) / p.size)


def sink_head(p):
    p = _dist(p)
    if p.size < HEAD_WINDOW + TAIL_WINDOW:
        raise ContractError(f"need at least {HEAD_WINDOW + TAIL_WINDOW} positions, got {p.size}")
    return float(p[:HEAD_WINDOW].sum())


def sink_tail(p):
    p = _dist(p)
    if p.size < HEAD_WINDOW + TAIL_WINDOW:
        raise ContractError(f"need at least {HEAD_WINDOW + TAIL_WINDOW} positions, got {p.size}")
    return float(p[-TAIL_WINDOW:].sum())


@dataclass
class AttentionStats:
    rows: list                      # dicts: layer, head, sparsity, sink_head, sink_tail
    cutoff: int
    sp_early: float = math.nan
    sp_latter: float = math.nan     # nan when no layer lies past the cutoff
    mean_sink_head: float = math.nan
    mean_sink_tail: float = math.nan
    per_layer: dict = field(default_factory=dict)


def summarize(traces, early_layer_cutoff, epsilon=0.05):
    """``traces[l][h]`` is the distribution of the final query of layer l+1, head h.

    Accepts per-layer arrays of shape (heads, n) or (heads, 1, n).
    """
    if not len(traces):
        raise ContractError("no traces")
    rows = []
    for li, layer in enumerate(traces):
        layer = np.asarray(layer, dtype=np.float64)
        layer = layer.reshape(layer.shape[0], -1) if layer.ndim == 3 and layer.shape[1] == 1 else layer
        for h, p in enumerate(layer):
            rows.append({"layer": li + 1, "head": h, "sparsity": sparsity(p, epsilon),
                         "sink_head": sink_head(p), "sink_tail": sink_tail(p)})
    return _aggregate(rows, early_layer_cutoff)


def _aggregate(rows, cutoff):
    stats = AttentionStats(rows, cutoff)
    early = [r["sparsity"] for r in rows if r["layer"] <= cutoff]
    later = [r["sparsity"] for r in rows if r["layer"] > cutoff]
    if early:
        stats.sp_early = float(np.mean(early))
    if later:
        stats.sp_latter = float(np.mean(later))
    stats.mean_sink_head = float(np.mean([r["sink_head"] for r in rows]))
    stats.mean_sink_tail = float(np.mean([r["sink_tail"] for r in rows]))
    for li in sorted({r["layer"] for r in rows}):
        sel = [r for r in rows if r["layer"] == li]
        stats.per_layer[li] = {key: float(np.mean([r[key] for r in sel]))
                               for key in ("sparsity", "sink_head", "sink_tail")}
    return stats


def average(stats_list):
    """Per (layer, head) mean over several inputs, aggregates recomputed."""
    if not stats_list:
        raise ContractError("nothing to average")
    cutoff = stats_list[0].cutoff
    keys = [(r["layer"], r["head"]) for r in stats_list[0].rows]
    rows = []
    for i, (layer, head) in enumerate(keys):
        rows.append({"layer": layer, "head": head,
                     **{m: float(np.mean([s.rows[i][m] for s in stats_list]))
                        for m in ("sparsity", "sink_head", "sink_tail")}})
    return _aggregate(rows, cutoff)


def _fmt(v):
    return "NA" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"


def write_stats_csv(stats: AttentionStats, path):
    """Per layer/head rows, then aggregate footer rows tagged in the layer column."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "head", "sparsity", "sink_head", "sink_tail"])
        for r in stats.rows:
            w.writerow([r["layer"], r["head"], _fmt(r["sparsity"]), _fmt(r["sink_head"]), _fmt(r["sink_tail"])])
        w.writerow(["sp_early", f"<={stats.cutoff}", _fmt(stats.sp_early), "", ""])
        w.writerow(["sp_latter", f">{stats.cutoff}", _fmt(stats.sp_latter), "", ""])
        w.writerow(["mean", "all", "", _fmt(stats.mean_sink_head), _fmt(stats.mean_sink_tail)])
