"""Per-layer key/value storage with role tags and pair accounting.

A "pair" is one cached (key, value) entry for one token in one layer, per
kv-head. Layers above the register depth never hold Prompt entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import Role


class LayerKvCache:
    """Growable key/value store for one layer of one session.

    Storage is (n_kv, capacity, head_dim) with doubling reallocation; only
    the first ``len(self)`` slots are live.
    """

    def __init__(self, layer, n_kv, head_dim, pruned=False, dtype=np.float32, capacity=16):
        self.layer = layer
        self.pruned = pruned
        self._k = np.empty((n_kv, capacity, head_dim), dtype=dtype)
        self._v = np.empty_like(self._k)
        self._roles = np.empty(capacity, dtype=np.int8)
        self._pos = np.empty(capacity, dtype=np.int64)
        self._n = 0

    def __len__(self):
        return self._n

    @property
    def keys(self):
        return self._k[:, :self._n]

    @property
    def values(self):
        return self._v[:, :self._n]

    @property
    def roles(self):
        return self._roles[:self._n]

    @property
    def positions(self):
        return self._pos[:self._n]

    def _reserve(self, extra):
        need = self._n + extra
        cap = self._k.shape[1]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_k", "_v"):
            old = getattr(self, name)
            new = np.empty((old.shape[0], cap, old.shape[2]), dtype=old.dtype)
            new[:, :self._n] = old[:, :self._n]
            setattr(self, name, new)
        for name in ("_roles", "_pos"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)

    def extend(self, keys, values, roles, positions):
        """Append entries. ``keys``/``values`` are (n_kv, t, head_dim)."""
        roles = np.asarray(roles, dtype=np.int8)
        if self.pruned and np.any(roles == Role.PROMPT):
            raise ContractError(f"layer {self.layer} is above the register depth; Prompt entries refused")
        t = len(roles)
        if keys.shape[1] != t or values.shape[1] != t or len(positions) != t:
            raise ContractError("entry counts disagree")
        self._reserve(t)
        self._k[:, self._n:self._n + t] = keys
        self._v[:, self._n:self._n + t] = values
        self._roles[self._n:self._n + t] = roles
        self._pos[self._n:self._n + t] = positions
        self._n += t

    def append(self, key, value, role, position):
        """Append one token's entry; ``key``/``value`` are (n_kv, head_dim)."""
        self.extend(key[:, None, :], value[:, None, :], [role], [position])

    def copy(self):
        out = LayerKvCache(self.layer, self._k.shape[0], self._k.shape[2], self.pruned,
                           self._k.dtype, max(1, self._n))
        out.extend(self.keys, self.values, self.roles, self.positions)
        return out


@dataclass
class CacheStats:
    pairs_per_layer: list
    total_pairs: int


class KvCache:
    """One LayerKvCache per layer; layers ``> k`` are marked pruned."""

    def __init__(self, config, k=None, dtype=np.float32):
        N = config.num_layers
        k = N if k is None else k
        self.layers = [LayerKvCache(i + 1, config.num_kv_heads, config.head_dim,
                                    pruned=i + 1 > k, dtype=dtype) for i in range(N)]

    def __getitem__(self, layer):
        """1-based layer lookup."""
        return self.layers[layer - 1]

    def append(self, layer, key, value, role, position):
        self[layer].append(key, value, role, position)

    def stats(self):
        counts = [len(c) for c in self.layers]
        return CacheStats(counts, sum(counts))


def append(cache: KvCache, layer, key, value, role, position):
    cache.append(layer, key, value, role, position)
    return cache


def expected_pairs(N, k, L_total, r, g=0):
    """Per-kv-head pair count summed over layers: k·(L+g) + (N−k)·(r+g)."""
    if r > L_total or k > N or g < 0:
        raise ContractError("need r <= L_total, k <= N, g >= 0")
    return k * (L_total + g) + (N - k) * (r + g)


def reduction_ratio(N, k, L_total, r):
    """Fraction of cache pairs removed relative to the unpruned model."""
    if r > L_total or k > N:
        raise ContractError("need r <= L_total and k <= N")
    return (N - k) * (L_total - r) / (N * L_total)


def cache_bytes(stats_or_pairs, n_kv, head_dim, element_bytes=4):
    """Bytes for keys and values: pairs × n_kv × head_dim × 2 × element_bytes."""
    pairs = stats_or_pairs.total_pairs if isinstance(stats_or_pairs, CacheStats) else int(stats_or_pairs)
    return pairs * n_kv * head_dim * 2 * element_bytes
