"""Analytic FLOPs / cache / time model for pruned-after-k inference.

FLOPs count matrix products only (projections, QKᵀ, AV, FFN), the same
accounting the engine's FlopCounter uses. ``L`` is the number of input
tokens seen by the unpruned layers and ``r`` the number kept above layer k.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .errors import ConfigError, ContractError
from .kvcache import reduction_ratio
from .model import ModelConfig, RegisterSpec


@dataclass(frozen=True)
class CostEnv:
    v_c: float = 989e12      # FLOP/s
    v_m: float = 3.35e12     # bytes/s
    element_bytes: int = 2

    def __post_init__(self):
        if self.v_c <= 0:
            raise ConfigError("must be > 0", "v_c")
        if self.v_m <= 0:
            raise ConfigError("must be > 0", "v_m")


@dataclass
class CostEstimate:
    flops_prefill: float
    flops_per_decode_step: float
    cache_bytes: float
    gamma_attn: float
    gamma_cache: float
    omega: float
    t_prefill: float
    t_decode_per_token: float
    t_total: float


def flops_mha(L, config: ModelConfig):
    n_h, d_a, d_h = config.num_heads, config.head_dim, config.hidden_dim
    return n_h * (8 * L * d_h * d_a + 4 * L * L * d_a)


def flops_ffn(L, config: ModelConfig):
    return 4 * L * config.hidden_dim * config.ffn_dim


def flops_layer(L, config: ModelConfig):
    """4L[n_h·d_a(2d_h + L) + d_h·d_f]."""
    n_h, d_a, d_h, d_f = config.num_heads, config.head_dim, config.hidden_dim, config.ffn_dim
    return 4 * L * (n_h * d_a * (2 * d_h + L) + d_h * d_f)


def _check(N, k, L, r):
    if not 1 <= k <= N:
        raise ContractError(f"need 1 <= k <= N, got k={k}, N={N}")
    if r > L:
        raise ContractError(f"need r <= L, got r={r}, L={L}")


def gamma_attn(N, k, L, r, config: ModelConfig):
    """Pruned / vanilla prefill FLOPs; approaches k/N when r << L."""
    _check(N, k, L, r)
    return k / N + (1 - k / N) * flops_layer(r, config) / flops_layer(L, config)


def gamma_cache(N, k, L, r):
    _check(N, k, L, r)
    return reduction_ratio(N, k, L, r)


def theoretical_speedup(N, k):
    if not 1 <= k <= N:
        raise ContractError(f"need 1 <= k <= N, got k={k}, N={N}")
    return N / k


def decode_step_flops(context, config: ModelConfig):
    """One new token attending over ``context`` keys (itself included): (attn, ffn)."""
    n_h, n_kv, d_a, d_h = config.num_heads, config.num_kv_heads, config.head_dim, config.hidden_dim
    proj = 2 * d_h * d_a * (2 * n_h + 2 * n_kv)
    return proj + 4 * context * n_h * d_a, 4 * d_h * config.ffn_dim


def _estimate(env, config, N, k, L, r, n_generate):
    """k layers over L tokens, N−k layers over r tokens (k = N: unpruned)."""
    flops_pre = k * flops_layer(L, config) + (N - k) * flops_layer(r, config)
    pair_bytes = config.num_kv_heads * config.head_dim * 2 * env.element_bytes
    t_d_sum, flops_d_sum = 0.0, 0.0
    for g in range(1, n_generate + 1):
        attn, ffn = 0.0, 0.0
        pairs = 0
        for layer in range(N):
            ctx = L + g if layer < k else r + g
            a, f = decode_step_flops(ctx, config)
            attn += a
            ffn += f
            pairs += ctx
        t_d_sum += max(pairs * pair_bytes / env.v_m, attn / env.v_c) + ffn / env.v_c
        flops_d_sum += attn + ffn
    t_p = flops_pre / env.v_c
    steps = max(n_generate, 1)
    cache = (k * L + (N - k) * r) * pair_bytes
    return flops_pre, flops_d_sum / steps, cache, t_p, t_d_sum / steps, t_p + t_d_sum


@dataclass
class CostComparison:
    vanilla: CostEstimate
    earn: CostEstimate

    @property
    def omega(self):
        return self.vanilla.t_total / self.earn.t_total


def time_estimate(env: CostEnv, config: ModelConfig, spec, L, n_generate=4):
    """Vanilla and pruned estimates: T = T_P + n_generate·T_d."""
    N, k, r = config.num_layers, spec.k, spec.r
    _check(N, k, L, r)
    v = _estimate(env, config, N, N, L, r, n_generate)
    e = _estimate(env, config, N, k, L, r, n_generate)
    vanilla = CostEstimate(v[0], v[1], v[2], 1.0, 0.0, 1.0, v[3], v[4], v[5])
    earn = CostEstimate(e[0], e[1], e[2], gamma_attn(N, k, L, r, config), gamma_cache(N, k, L, r),
                        theoretical_speedup(N, k), e[3], e[4], e[5])
    return CostComparison(vanilla, earn)


COST_COLUMNS = ["N", "k", "L", "r", "gamma_attn", "gamma_cache", "omega", "t_prefill", "t_decode",
                "omega_time"]


def cost_rows(env, config, ks, Ls, r, n_generate=4):
    rows = []
    for L in Ls:
        for k in ks:
            spec = RegisterSpec(r - r // 2, r // 2, k)
            cmp = time_estimate(env, config, spec, L, n_generate)
            e = cmp.earn
            rows.append({"N": config.num_layers, "k": k, "L": L, "r": r, "gamma_attn": e.gamma_attn,
                         "gamma_cache": e.gamma_cache, "omega": e.omega, "t_prefill": e.t_prefill,
                         "t_decode": e.t_decode_per_token, "omega_time": cmp.omega})
    return rows


def write_cost_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COST_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


TYPICAL = ModelConfig(num_layers=32, num_heads=32, num_kv_heads=32, head_dim=128, hidden_dim=4096,
                      ffn_dim=11008, vocab_size=32000)

