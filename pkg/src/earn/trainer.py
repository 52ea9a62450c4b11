"""Register training: NLL on identifier tokens, manual backprop, AdamW + cosine.

The backward pass walks the activations kept by ``model.run_layers``; when
prompt rows are pruned after layer k they simply never enter the graph above
that layer, so they receive gradient only through layers 1..k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import ModelConfig, RegisterSpec, Role, Weights, run_layers
from .numkernel import rope_apply, silu_grad

MODES = ("vanilla", "earn", "earn-no-rt")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.02
    effective_batch: int = 128
    micro_batch: int = 32
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("must lie in [0, 1)", "warmup_ratio")
        if self.learning_rate <= 0:
            raise ConfigError("must be > 0", "learning_rate")
        if self.effective_batch < 1 or self.micro_batch < 1:
            raise ConfigError("must be >= 1", "effective_batch")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "epochs")


@dataclass(frozen=True)
class TrainExample:
    prompt: tuple      # task tokens + padded history identifiers (all Prompt role)
    target: tuple      # identifier of the next item
    item: int = -1     # catalog id of the target, for ranking metrics
    user: str = ""


@dataclass
class Batch:
    tokens: np.ndarray     # (B, T)
    roles: np.ndarray      # (T,)
    positions: np.ndarray  # (T,)
    targets: np.ndarray    # (B, J)
    mask: np.ndarray       # (B, J) 1.0 where the target token counts

    def __len__(self):
        return self.tokens.shape[0]


def make_batch(examples, spec: RegisterSpec, vocab_size, loss_mask=None):
    """Stack examples as [prefix regs; prompt; suffix regs; target[:-1]]."""
    P = {len(e.prompt) for e in examples}
    J = {len(e.target) for e in examples}
    if len(P) != 1 or len(J) != 1:
        raise ContractError("examples in a batch need equal prompt and target lengths")
    P, J = P.pop(), J.pop()
    pre = list(range(vocab_size, vocab_size + spec.n_prefix))
    suf = list(range(vocab_size + spec.n_prefix, vocab_size + spec.r))
    tokens = np.array([pre + list(e.prompt) + suf + list(e.target[:-1]) for e in examples], dtype=np.int64)
    roles = np.array([Role.PREFIX] * spec.n_prefix + [Role.PROMPT] * P + [Role.SUFFIX] * spec.n_suffix
                     + [Role.GENERATED] * (J - 1), dtype=np.int8)
    targets = np.array([e.target for e in examples], dtype=np.int64)
    mask = np.ones(targets.shape) if loss_mask is None else np.asarray(loss_mask, dtype=float)
    return Batch(tokens, roles, np.arange(tokens.shape[1]), targets, mask)


def _prune_depth(config, spec, mode):
    if mode == "vanilla" or spec.k >= config.num_layers:
        return None
    return spec.k


def forward_batch(weights, config, spec, batch: Batch, mode="earn", keep=False, path="pruned"):
    """Forward for loss computation; ``path="oracle"`` masks instead of pruning."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}", "mode")
    J = batch.targets.shape[1]
    prune = _prune_depth(config, spec, mode)
    if path == "oracle":
        res = run_layers(weights, config, batch.tokens, batch.roles, batch.positions,
                         oracle_k=prune, keep=keep)
        tail_rows = np.flatnonzero(batch.roles != Role.PROMPT) if prune is not None else np.arange(len(batch.roles))
        return res, res.logits[:, tail_rows[-J:], :]
    res = run_layers(weights, config, batch.tokens, batch.roles, batch.positions,
                     prune_k=prune, keep=keep, tail=J)
    if res.logits.shape[1] < J:
        raise ContractError("too few retained rows to predict every target token")
    return res, res.logits


def _nll(logits, targets, mask):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    return (lse - picked) * mask


def loss_nll(weights, config, spec, batch: Batch, mode="earn", path="pruned"):
    """Mean over examples of −Σ_j log P(Y_j | X, Y_<j)."""
    _, logits = forward_batch(weights, config, spec, batch, mode, path=path)
    return float(_nll(logits, batch.targets, batch.mask).sum(axis=-1).mean())


def _rms_backward(x, gain, dy, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    dgain = (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    z = dy * gain
    dx = r * z - x * (r ** 3) * np.mean(z * x, axis=-1, keepdims=True)
    return dx, dgain


def _wgrad(inp, dout):
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def _rope_back(d, pos, config):
    return rope_apply(d, pos, config.rope_base, inverse=True)


def layer_backward(lw, config: ModelConfig, acts, dout):
    """Gradients of one block given its kept activations and d(output)."""
    eps = config.norm_eps
    n_h, n_kv, d_a, g = config.num_heads, config.num_kv_heads, config.head_dim, config.group
    grads = {}
    # feed-forward
    grads["w_down"] = _wgrad(acts["a"], dout)
    du = (dout @ lw["w_down"].T) * silu_grad(acts["u"])
    grads["w_up"] = _wgrad(acts["h2"], du)
    dh2 = du @ lw["w_up"].T
    dx1_norm, grads["ffn_norm"] = _rms_backward(acts["x1"], lw["ffn_norm"], dh2, eps)
    dx1 = dout + dx1_norm
    # attention output projection
    grads["wo"] = _wgrad(acts["o"], dx1)
    do = dx1 @ lw["wo"].T
    T = do.shape[-2]
    do = np.swapaxes(do.reshape(*do.shape[:-1], n_h, d_a), -2, -3)
    do = do.reshape(*do.shape[:-3], n_kv, g, T, d_a)
    p, q, K, V = acts["p"], acts["q"], acts["K"], acts["V"]
    dp = do @ np.swapaxes(V, -1, -2)[..., None, :, :]
    dV = (np.swapaxes(p, -1, -2) @ do).sum(axis=-3)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds *= np.asarray(1.0 / math.sqrt(d_a), dtype=ds.dtype)
    dq = ds @ K[..., None, :, :]
    dK = (np.swapaxes(ds, -1, -2) @ q).sum(axis=-3)
    pos = acts["pos"]
    dq = _rope_back(dq.reshape(*dq.shape[:-4], n_h, T, d_a), pos, config)
    dK = _rope_back(dK, pos, config)

    def flat(t):
        return np.moveaxis(t, -3, -2).reshape(*t.shape[:-3], T, t.shape[-3] * d_a)

    dq, dK, dV = flat(dq), flat(dK), flat(dV)
    h = acts["h"]
    grads["wq"] = _wgrad(h, dq)
    grads["wk"] = _wgrad(h, dK)
    grads["wv"] = _wgrad(h, dV)
    dh = dq @ lw["wq"].T + dK @ lw["wk"].T + dV @ lw["wv"].T
    dx_norm, grads["attn_norm"] = _rms_backward(acts["x"], lw["attn_norm"], dh, eps)
    return dx1 + dx_norm, grads


def backward(weights: Weights, config, spec, batch: Batch, mode="earn"):
    """Returns (loss, gradients by tensor name) for the mean per-example NLL."""
    res, logits = forward_batch(weights, config, spec, batch, mode, keep=True)
    B, J = batch.targets.shape
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    loss = float(_nll(logits, batch.targets, batch.mask).sum(axis=-1).mean())
    dlogits = probs
    np.put_along_axis(dlogits, batch.targets[..., None],
                      np.take_along_axis(probs, batch.targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits = dlogits * (batch.mask[..., None] / B).astype(probs.dtype)

    grads = {}
    hf, xf = res.final["h"], res.final["x"]
    grads["head"] = _wgrad(hf, dlogits)
    dhf = dlogits @ weights["head"].T
    dxf, grads["final_norm"] = _rms_backward(xf, weights["final_norm"], dhf, config.norm_eps)
    x_last = res.hidden[-1]
    dx = np.zeros_like(x_last)
    dx[..., -J:, :] = dxf

    prune = _prune_depth(config, spec, mode)
    keep_rows = np.flatnonzero(batch.roles != Role.PROMPT)
    for i in reversed(range(config.num_layers)):
        dx, lg = layer_backward(weights.layer(i), config, res.acts[i], dx)
        for key, val in lg.items():
            grads[f"layers.{i}.{key}"] = val
        if prune is not None and i == prune:
            full = np.zeros(dx.shape[:-2] + (len(batch.roles), dx.shape[-1]), dtype=dx.dtype)
            full[..., keep_rows, :] = dx
            dx = full

    table = np.zeros((config.vocab_size + spec.r, config.hidden_dim), dtype=dx.dtype)
    np.add.at(table, batch.tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    V = config.vocab_size
    grads["tok_emb"] = table[:V]
    grads["prefix_reg"] = table[V:V + spec.n_prefix]
    grads["suffix_reg"] = table[V + spec.n_prefix:]
    return loss, grads


def finite_difference_grads(weights: Weights, config, spec, batch, mode="earn", step=1e-4, names=None):
    """Central differences in float64 for every entry of the named tensors."""
    w = weights.astype(np.float64)
    out = {}
    for name in names or list(w):
        t = w[name]
        g = np.zeros_like(t)
        flat, gflat = t.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            up = loss_nll(w, config, spec, batch, mode)
            flat[j] = old - step
            down = loss_nll(w, config, spec, batch, mode)
            flat[j] = old
            gflat[j] = (up - down) / (2 * step)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(weights: Weights, grads, state: AdamState, lr, cfg: TrainConfig = None):
    """In-place AdamW update with decoupled weight decay (not applied to 1-d gains)."""
    cfg = cfg or TrainConfig()
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        w = weights[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        if m.shape != w.shape or g.shape != w.shape:
            raise ContractError(f"optimizer state shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and w.ndim > 1:
            upd = upd + cfg.weight_decay * w
        w -= (lr * upd).astype(w.dtype)
    return weights, state


def cosine_lr(step, total_steps, warmup_ratio, peak_lr):
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_ratio * total_steps
    if step < warm:
        return peak_lr * step / warm
    if total_steps <= warm:
        return peak_lr
    progress = (step - warm) / (total_steps - warm)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training loop

def _batches(examples, size):
    for s in range(0, len(examples), size):
        yield examples[s:s + size]


def train(weights: Weights, config, spec, train_examples, tc: TrainConfig, mode="earn", eval_fn=None,
          log_fn=None):
    """Seeded training. Returns (weights, log) with one row per epoch.

    ``earn-no-rt`` performs no updates: it reports the pruned loss of the
    given (vanilla-trained) weights.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}", "mode")
    spec.check(config)
    weights = weights.copy()
    examples = list(train_examples)
    log = []
    if mode == "earn-no-rt":
        loss = _mean_loss(weights, config, spec, examples, tc.micro_batch, "earn")
        metric = eval_fn(weights, "earn") if eval_fn else float("nan")
        for epoch in range(1, tc.epochs + 1):
            log.append({"epoch": epoch, "loss": loss, "valid_recall10": metric})
        return weights, log

    steps_per_epoch = math.ceil(len(examples) / tc.effective_batch)
    total = max(1, steps_per_epoch * tc.epochs)
    state = AdamState()
    rng = np.random.default_rng(tc.seed)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(examples))
        epoch_loss, seen = 0.0, 0
        for group in _batches([examples[i] for i in order], tc.effective_batch):
            acc = None
            for mb in _batches(group, tc.micro_batch):
                batch = make_batch(mb, spec, config.vocab_size)
                loss, grads = backward(weights, config, spec, batch, mode)
                frac = len(mb) / len(group)
                epoch_loss += loss * len(mb)
                seen += len(mb)
                if acc is None:
                    acc = {k: g * frac for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        acc[k] += g * frac
            step += 1
            adamw_step(weights, acc, state, cosine_lr(step, total, tc.warmup_ratio, tc.learning_rate), tc)
        row = {"epoch": epoch, "loss": epoch_loss / max(seen, 1),
               "valid_recall10": eval_fn(weights, mode) if eval_fn else float("nan")}
        log.append(row)
        if log_fn:
            log_fn(row)
    return weights, log


def _mean_loss(weights, config, spec, examples, size, mode):
    total, n = 0.0, 0
    for mb in _batches(examples, size):
        batch = make_batch(mb, spec, config.vocab_size)
        total += loss_nll(weights, config, spec, batch, mode) * len(mb)
        n += len(mb)
    return total / max(n, 1)
