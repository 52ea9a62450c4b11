"""Synthetic sequential-recommendation data, JSON-lines I/O, splits and metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .trainer import TrainExample

IDENT_LEN = 4


@dataclass(frozen=True)
class Interaction:
    user: str
    item: int
    ts: int


@dataclass
class InteractionLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def sorted(self):
        """Stable global sort by timestamp."""
        return InteractionLog(sorted(self.records, key=lambda r: r.ts))


@dataclass(frozen=True)
class Vocab:
    """Token id layout: PAD=0, task tokens, then one codebook per identifier slot."""
    n_task: int = 4
    codebook: int = 8
    ident_len: int = IDENT_LEN

    PAD = 0

    @property
    def task_tokens(self):
        return tuple(range(1, 1 + self.n_task))

    @property
    def ident_base(self):
        return 1 + self.n_task

    @property
    def size(self):
        return self.ident_base + self.ident_len * self.codebook

    def token(self, slot, code):
        return self.ident_base + slot * self.codebook + code

    def is_ident_token(self, tok):
        return self.ident_base <= tok < self.size


@dataclass
class Catalog:
    idents: dict            # item id -> identifier tuple (token ids)
    vocab: Vocab
    clusters: dict = field(default_factory=dict)  # item id -> latent cluster (synthetic only)

    def __post_init__(self):
        self._by_ident = {tuple(v): k for k, v in self.idents.items()}
        if len(self._by_ident) != len(self.idents):
            raise ContractError("identifiers must be unique")
        for ident in self.idents.values():
            if len(ident) != self.vocab.ident_len or not all(self.vocab.is_ident_token(t) for t in ident):
                raise ContractError(f"identifier {ident} outside the identifier vocabulary")

    def item_of(self, ident):
        return self._by_ident.get(tuple(ident))

    def __len__(self):
        return len(self.idents)


def effective_clusters(n_items, n_clusters):
    return max(1, min(n_clusters, n_items // 2))


def synthetic_codebook(n_items, n_clusters):
    """Smallest per-slot codebook holding every cluster id and three in-cluster digits."""
    n_clusters = effective_clusters(n_items, n_clusters)
    biggest = -(-n_items // n_clusters)
    codebook = n_clusters
    while codebook ** 3 < biggest:
        codebook += 1
    return codebook


def generate_synthetic(n_users, n_items, seq_len_range=(5, 15), seed=0, n_clusters=8,
                       p_within=0.8, zipf=1.0, n_task=4, span=1_000_000):
    """Seeded Markov users over clustered items with Zipf popularity.

    Each next item stays in the current item's cluster with probability
    ``p_within`` (never repeating the current item), otherwise moves to
    another cluster; within the chosen set items are drawn by popularity.
    Identifiers are (cluster, three digits of the item's index in its
    cluster), one codebook per slot.
    """
    if n_items < 2:
        raise ContractError("need at least 2 items")
    rng = np.random.default_rng(seed)
    n_clusters = effective_clusters(n_items, n_clusters)
    perm = rng.permutation(n_items)
    cluster = np.empty(n_items, dtype=np.int64)
    cluster[perm] = np.arange(n_items) % n_clusters
    rank = rng.permutation(n_items)
    pop = 1.0 / (rank + 1.0) ** zipf
    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    codebook = synthetic_codebook(n_items, n_clusters)
    vocab = Vocab(n_task=n_task, codebook=codebook)
    idents = {}
    for c, m in enumerate(members):
        for j, item in enumerate(m):
            digits = (c, j // codebook ** 2, (j // codebook) % codebook, j % codebook)
            idents[int(item)] = tuple(vocab.token(s, d) for s, d in enumerate(digits))
    catalog = Catalog(idents, vocab, {int(i): int(cluster[i]) for i in range(n_items)})

    def draw(cands):
        w = pop[cands]
        return int(cands[rng.choice(len(cands), p=w / w.sum())])

    everything = np.arange(n_items)
    records = []
    lo, hi = seq_len_range
    for u in range(n_users):
        length = int(rng.integers(lo, hi + 1))
        times = np.sort(rng.integers(0, span, size=length))
        item = draw(everything)
        for step, t in enumerate(times.tolist()):
            if step:
                c = cluster[item]
                same = members[c][members[c] != item]
                if same.size and rng.random() < p_within:
                    item = draw(same)
                else:
                    other = everything[cluster != c] if n_clusters > 1 else everything[everything != item]
                    item = draw(other)
            records.append(Interaction(f"u{u}", item, t))
    return InteractionLog(records).sorted(), catalog


# ---------------------------------------------------------------------------
# JSON-lines I/O

def write_log(log: InteractionLog, path):
    with open(path, "w") as f:
        for r in log:
            f.write(json.dumps({"user": r.user, "item": r.item, "ts": r.ts}) + "\n")


def ingest(path, format="jsonl"):
    """Read a JSON-lines interaction log; errors name the offending line."""
    if format != "jsonl":
        raise DataError(f"unsupported format {format!r}")
    records = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"invalid JSON ({e.msg})", n) from None
            if not isinstance(obj, dict) or set(obj) != {"user", "item", "ts"}:
                raise DataError("expected keys user, item, ts", n)
            user, item, ts = obj["user"], obj["item"], obj["ts"]
            if not isinstance(user, str) or type(item) is not int or type(ts) is not int:
                raise DataError("user must be a string, item and ts integers", n)
            records.append(Interaction(user, item, ts))
    return InteractionLog(records)


def write_catalog(catalog: Catalog, path):
    with open(path, "w") as f:
        for item in sorted(catalog.idents):
            f.write(json.dumps({"item": item, "ident": list(catalog.idents[item])}) + "\n")


def read_catalog(path, vocab: Vocab):
    idents = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                idents[int(obj["item"])] = tuple(int(t) for t in obj["ident"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError("expected {\"item\": int, \"ident\": [4 ints]}", n) from None
    return Catalog(idents, vocab)


# ---------------------------------------------------------------------------
# splitting and example construction

@dataclass
class SplitDataset:
    train: list
    valid: list
    test: list


def split_sizes(n):
    """8:1:1 by count; valid/test get floor(n/10) (at least 1 once n >= 3), train the rest."""
    tail = n // 10
    if tail == 0 and n >= 3:
        tail = 1
    return n - 2 * tail, tail, tail


def chronological_split(log: InteractionLog):
    if not len(log):
        raise ContractError("empty log")
    recs = log.sorted().records
    n_train, n_valid, _ = split_sizes(len(recs))
    return SplitDataset(recs[:n_train], recs[n_train:n_train + n_valid], recs[n_train + n_valid:])


def build_prompt(history, catalog: Catalog, history_len):
    """Task tokens, PAD filler, then the last ``history_len`` identifiers (oldest first)."""
    v = catalog.vocab
    hist = list(history)[-history_len:]
    body = [t for item in hist for t in catalog.idents[item]]
    pad = [v.PAD] * (history_len * v.ident_len - len(body))
    return tuple(v.task_tokens) + tuple(pad) + tuple(body)


def make_examples(split: SplitDataset, catalog: Catalog, history_len=8):
    """Train: every train-region interaction with some history.

    Valid/test: one example per user, the user's last interaction inside the
    region. History is everything the user did before the target.
    """
    seen = {}
    out = {"train": [], "valid": [], "test": []}
    last = {"valid": {}, "test": {}}
    for region in ("train", "valid", "test"):
        for r in getattr(split, region):
            hist = seen.setdefault(r.user, [])
            if hist:
                ex = TrainExample(build_prompt(hist, catalog, history_len), catalog.idents[r.item], r.item, r.user)
                if region == "train":
                    out["train"].append(ex)
                else:
                    last[region][r.user] = ex
            hist.append(r.item)
    for region in ("valid", "test"):
        out[region] = list(last[region].values())
    return out["train"], out["valid"], out["test"]


# ---------------------------------------------------------------------------
# metrics

def _rank_of(ranked, truth, K):
    for i, item in enumerate(list(ranked)[:K]):
        if item == truth:
            return i + 1
    return None


def recall_at_k(ranked, truth, K):
    """Mean hit rate in the top K. ``ranked``: list of ranked item lists; ``truth``: items."""
    if K < 1:
        raise ContractError("K must be >= 1")
    if not len(truth):
        return 0.0
    return float(np.mean([_rank_of(r, t, K) is not None for r, t in zip(ranked, truth)]))


def ndcg_at_k(ranked, truth, K):
    """Mean 1/log2(rank+1) over examples, 0 on a miss."""
    if K < 1:
        raise ContractError("K must be >= 1")
    if not len(truth):
        return 0.0
    gains = []
    for r, t in zip(ranked, truth):
        rank = _rank_of(r, t, K)
        gains.append(0.0 if rank is None else 1.0 / math.log2(rank + 1))
    return float(np.mean(gains))


def write_metric_report(rows, path):
    """rows: iterable of (method, K, recall, ndcg)."""
    with open(path, "w") as f:
        f.write("method,K,recall,ndcg\n")
        for method, K, rec, nd in rows:
            f.write(f"{method},{K},{rec:.6f},{nd:.6f}\n")
