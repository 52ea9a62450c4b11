"""Experiment configuration: one JSON document, a published schema, field-named errors.

Only ``EARN_OUT`` (output directory) and ``EARN_WORKERS`` (worker count)
may come from the environment.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import jsonschema

from .costmodel import CostEnv
from .errors import ConfigError
from .model import ModelConfig, RegisterSpec
from .recdata import Vocab, synthetic_codebook
from .trainer import MODES, TrainConfig
from .bench import METHODS


@dataclass
class DataConfig:
    source: str = "synthetic"         # "synthetic" or "ingest"
    n_users: int = 500
    n_items: int = 200
    seq_len_min: int = 5
    seq_len_max: int = 15
    n_clusters: int = 8
    p_within: float = 0.8
    zipf: float = 1.0
    n_task: int = 4
    codebook: int | None = None       # required for ingested catalogs
    history_len: int = 8
    log_path: str | None = None
    catalog_path: str | None = None

    def vocab(self):
        cb = self.codebook
        if cb is None:
            cb = synthetic_codebook(self.n_items, self.n_clusters)
        return Vocab(n_task=self.n_task, codebook=cb)


@dataclass
class EvalConfig:
    beam_width: int = 20
    ks: list = field(default_factory=lambda: [10, 20])
    max_examples: int | None = None


@dataclass
class BenchConfig:
    methods: list = field(default_factory=lambda: ["vanilla", "earn"])
    lengths: list = field(default_factory=lambda: [1024, 2048, 4096])
    batch_sizes: list = field(default_factory=lambda: [1])
    decode_steps: int = 4
    repeats: int = 5
    warmup: int = 2
    window_initial: int = 4
    window_recent: int = 64
    cut: int | None = None
    element_bytes: int = 4
    model: dict | None = None         # overrides the experiment model (random weights)
    k: int | None = None


@dataclass
class CostConfig:
    model: dict | None = None         # default: 32 layers, 32 heads, hidden 4096
    ks: list = field(default_factory=lambda: [4, 8, 16])
    lengths: list = field(default_factory=lambda: [512, 1024, 2048])
    r: int = 2
    n_generate: int = 4
    v_c: float = 989e12
    v_m: float = 3.35e12
    element_bytes: int = 2


@dataclass
class AttnConfig:
    n_examples: int = 16
    epsilon: float = 0.05
    early_layer_cutoff: int | None = None   # default: k


@dataclass
class ExperimentConfig:
    model: ModelConfig
    registers: RegisterSpec
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    attn: AttnConfig = field(default_factory=AttnConfig)
    mode: str = "earn"
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1

    def to_dict(self):
        doc = dataclasses.asdict(self)
        del doc["train"]["seed"]   # mirrors the top-level seed
        return doc


def _int(minimum=None, nullable=False):
    s = {"type": ["integer", "null"] if nullable else "integer"}
    if minimum is not None:
        s["minimum"] = minimum
    return s


def _num(nullable=False):
    return {"type": ["number", "null"] if nullable else "number"}


def _ints(minimum=1):
    return {"type": "array", "items": {"type": "integer", "minimum": minimum}, "minItems": 1}


def _section(props):
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": _section({
            "num_layers": _int(1), "num_heads": _int(1), "num_kv_heads": _int(1), "head_dim": _int(2),
            "hidden_dim": _int(1), "ffn_dim": _int(1), "vocab_size": _int(1, nullable=True),
            "rope_base": _num(), "max_positions": _int(1), "norm_eps": _num(),
        }),
        "registers": _section({"n_prefix": _int(0), "n_suffix": _int(0), "k": _int(1)}),
        "train": _section({
            "learning_rate": _num(), "warmup_ratio": _num(), "effective_batch": _int(1),
            "micro_batch": _int(1), "epochs": _int(0), "weight_decay": _num(), "beta1": _num(),
            "beta2": _num(), "adam_eps": _num(),
        }),
        "data": _section({
            "source": {"enum": ["synthetic", "ingest"]},
            "n_users": _int(1), "n_items": _int(2), "seq_len_min": _int(1), "seq_len_max": _int(1),
            "n_clusters": _int(1), "p_within": _num(), "zipf": _num(), "n_task": _int(0),
            "codebook": _int(1, nullable=True), "history_len": _int(1),
            "log_path": {"type": ["string", "null"]}, "catalog_path": {"type": ["string", "null"]},
        }),
        "eval": _section({"beam_width": _int(1), "ks": _ints(), "max_examples": _int(1, nullable=True)}),
        "bench": _section({
            "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
            "lengths": _ints(), "batch_sizes": _ints(), "decode_steps": _int(0), "repeats": _int(1),
            "warmup": _int(0), "window_initial": _int(0), "window_recent": _int(0),
            "cut": _int(1, nullable=True), "element_bytes": _int(1),
            "model": {"type": ["object", "null"]}, "k": _int(1, nullable=True),
        }),
        "cost": _section({
            "model": {"type": ["object", "null"]}, "ks": _ints(), "lengths": _ints(), "r": _int(0),
            "n_generate": _int(0), "v_c": _num(), "v_m": _num(), "element_bytes": _int(1),
        }),
        "attn": _section({"n_examples": _int(1), "epsilon": _num(), "early_layer_cutoff": _int(0, nullable=True)}),
        "mode": {"enum": list(MODES)},
        "seed": _int(0),
        "out": {"type": "string"},
        "workers": _int(1),
    },
}


def _field_of(err):
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return ".".join(filter(None, [path, extra[0] if extra else ""]))
    return path or "<root>"


def _build(cls, data, prefix):
    try:
        return cls(**data)
    except ConfigError as e:
        raise ConfigError(e.detail, f"{prefix}.{e.field}" if e.field else prefix) from None
    except TypeError as e:
        raise ConfigError(str(e), prefix) from None


# Defaults for the recommendation experiments; any key in the document wins.
DEFAULTS = {
    "model": {"num_layers": 8, "num_heads": 4, "num_kv_heads": 4, "head_dim": 32, "hidden_dim": 128,
              "ffn_dim": 256, "vocab_size": None},
    "registers": {"n_prefix": 1, "n_suffix": 1, "k": 2},
    "train": {"learning_rate": 2e-3, "epochs": 5, "micro_batch": 64, "effective_batch": 128},
}


def _merge(base, over):
    out = dict(base)
    for key, val in over.items():
        out[key] = _merge(out[key], val) if isinstance(val, dict) and isinstance(out.get(key), dict) else val
    return out


def from_dict(doc, env=None):
    """Validate against SCHEMA, apply env overrides, then cross-field checks."""
    doc = json.loads(json.dumps(doc))
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(e.message, _field_of(e)) from None
    doc = _merge(DEFAULTS, doc)
    env = os.environ if env is None else env
    if env.get("EARN_OUT"):
        doc["out"] = env["EARN_OUT"]
    if env.get("EARN_WORKERS"):
        try:
            doc["workers"] = int(env["EARN_WORKERS"])
        except ValueError:
            raise ConfigError(f"EARN_WORKERS={env['EARN_WORKERS']!r} is not an integer", "workers") from None
        if doc["workers"] < 1:
            raise ConfigError("must be >= 1", "workers")

    data = _build(DataConfig, doc.get("data", {}), "data")
    model_doc = dict(doc.get("model", {}))
    vocab = data.vocab()
    if model_doc.get("vocab_size") is None:
        model_doc["vocab_size"] = vocab.size
    cfg = ExperimentConfig(
        model=_build(ModelConfig, model_doc, "model"),
        registers=_build(RegisterSpec, doc.get("registers", {}), "registers"),
        train=_build(TrainConfig, {**doc.get("train", {}), "seed": doc.get("seed", 0)}, "train"),
        data=data,
        eval=_build(EvalConfig, doc.get("eval", {}), "eval"),
        bench=_build(BenchConfig, doc.get("bench", {}), "bench"),
        cost=_build(CostConfig, doc.get("cost", {}), "cost"),
        attn=_build(AttnConfig, doc.get("attn", {}), "attn"),
        **{k: doc[k] for k in ("mode", "seed", "out", "workers") if k in doc},
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    m, reg, d = cfg.model, cfg.registers, cfg.data
    if reg.k > m.num_layers:
        raise ConfigError(f"k={reg.k} exceeds num_layers={m.num_layers}", "registers.k")
    if reg.r < 1:
        raise ConfigError("at least one register is needed to carry the prompt past layer k", "registers")
    vocab = d.vocab()
    if vocab.size > m.vocab_size:
        raise ConfigError(f"identifier vocabulary needs {vocab.size} ids, model has {m.vocab_size}",
                          "model.vocab_size")
    if d.seq_len_min > d.seq_len_max:
        raise ConfigError("seq_len_min exceeds seq_len_max", "data.seq_len_min")
    if not 0.0 <= d.p_within <= 1.0:
        raise ConfigError("must lie in [0, 1]", "data.p_within")
    if d.source == "synthetic" and d.codebook is not None:
        if d.codebook < synthetic_codebook(d.n_items, d.n_clusters):
            raise ConfigError("too small for the synthetic catalog", "data.codebook")
    if d.source == "ingest":
        if not d.log_path:
            raise ConfigError("required when source is ingest", "data.log_path")
        if not d.catalog_path:
            raise ConfigError("required when source is ingest", "data.catalog_path")
        if d.codebook is None:
            raise ConfigError("required when source is ingest", "data.codebook")
    prompt_len = vocab.n_task + d.history_len * vocab.ident_len
    if prompt_len + reg.r + 4 > m.max_positions:
        raise ConfigError(f"prompts of {prompt_len} tokens do not fit", "model.max_positions")
    if cfg.train.micro_batch > cfg.train.effective_batch:
        raise ConfigError("exceeds effective_batch", "train.micro_batch")
    if cfg.eval.max_examples is not None and cfg.eval.max_examples < 1:
        raise ConfigError("must be >= 1", "eval.max_examples")
    bm = bench_model(cfg)
    bk = cfg.bench.k or reg.k
    if bk > bm.num_layers:
        raise ConfigError(f"k={bk} exceeds bench num_layers={bm.num_layers}", "bench.k")
    if cfg.bench.cut is not None and cfg.bench.cut > bm.num_layers:
        raise ConfigError(f"exceeds bench num_layers={bm.num_layers}", "bench.cut")
    if max(cfg.bench.lengths) + cfg.bench.decode_steps > bm.max_positions:
        raise ConfigError(f"longest input exceeds max_positions={bm.max_positions}", "bench.lengths")
    if min(cfg.bench.lengths) <= reg.r:
        raise ConfigError("every length must exceed the register count", "bench.lengths")
    cm = cost_model(cfg)
    if max(cfg.cost.ks) > cm.num_layers:
        raise ConfigError(f"exceeds cost model num_layers={cm.num_layers}", "cost.ks")
    if cfg.cost.r > min(cfg.cost.lengths):
        raise ConfigError("exceeds the shortest length", "cost.r")
    _build(CostEnv, {"v_c": cfg.cost.v_c, "v_m": cfg.cost.v_m, "element_bytes": cfg.cost.element_bytes}, "cost")
    if not 0.0 < cfg.attn.epsilon < 1.0:
        raise ConfigError("must lie in (0, 1)", "attn.epsilon")
    cut = cfg.attn.early_layer_cutoff
    if cut is not None and cut > m.num_layers:
        raise ConfigError(f"exceeds num_layers={m.num_layers}", "attn.early_layer_cutoff")
    return cfg


def _sub_model(doc, base, prefix):
    if doc is None:
        return base
    merged = {**dataclasses.asdict(base), **doc}
    return _build(ModelConfig, merged, prefix)


def bench_model(cfg: ExperimentConfig):
    return _sub_model(cfg.bench.model, cfg.model, "bench.model")


def cost_model(cfg: ExperimentConfig):
    from .costmodel import TYPICAL
    return _sub_model(cfg.cost.model, TYPICAL, "cost.model")


def default_config():
    return from_dict({}, env={})


def load(path, env=None):
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}: {e.msg}", "<document>") from None
    return from_dict(doc, env)


def schema_json():
    return json.dumps(SCHEMA, indent=2, sort_keys=True)
