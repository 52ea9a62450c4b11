"""Command-line entry point: gen-data, train, eval, bench, cost-model, analyze-attn.

Every command reads one JSON config (``--config``), applies ``--seed``,
``--out``, ``--workers`` and ``--mode`` on top, validates, and writes CSV
reports into the output directory. Exit codes: 0 ok, 2 bad config,
3 missing or malformed data.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from . import config as cfgmod
from .attnstats import average, summarize, write_stats_csv
from .bench import run_bench, write_bench_csv
from .costmodel import CostEnv, cost_rows, write_cost_csv
from .errors import ConfigError, ContractError, DataError
from .evaluation import evaluate, layout_for
from .model import init_weights
from .recdata import (chronological_split, generate_synthetic, ingest, make_examples, read_catalog,
                      write_catalog, write_log, write_metric_report)
from .runtime import prefill
from .trainer import train

log = logging.getLogger("earn")

LOG_NAME = "interactions.jsonl"
CATALOG_NAME = "catalog.jsonl"


def data_paths(cfg):
    d = cfg.data
    if d.source == "ingest":
        return Path(d.log_path), Path(d.catalog_path)
    base = Path(cfg.out) / "data"
    return base / LOG_NAME, base / CATALOG_NAME


def checkpoint_path(cfg, mode=None):
    return Path(cfg.out) / f"model-{mode or cfg.mode}.ckpt"


def load_examples(cfg):
    log_path, cat_path = data_paths(cfg)
    for p in (log_path, cat_path):
        if not p.exists():
            hint = " (run gen-data first)" if cfg.data.source == "synthetic" else ""
            raise DataError(f"missing data file {p}{hint}")
    interactions = ingest(log_path)
    catalog = read_catalog(cat_path, cfg.data.vocab())
    unknown = {r.item for r in interactions} - set(catalog.idents)
    if unknown:
        raise DataError(f"{len(unknown)} logged items are missing from the catalog, e.g. {min(unknown)}")
    tr, va, te = make_examples(chronological_split(interactions), catalog, cfg.data.history_len)
    return tr, va, te, catalog


def _limit(examples, n):
    return examples if n is None else examples[:n]


def _load_weights(cfg, path):
    weights, meta = checkpoint.load(path)
    try:
        weights.check(cfg.model, cfg.registers)
    except ContractError as e:
        raise DataError(f"checkpoint {path} does not fit the configured model: {e}") from None
    return weights, meta


def _meta(cfg, mode):
    return {"model": dataclasses.asdict(cfg.model), "registers": dataclasses.asdict(cfg.registers),
            "mode": mode, "seed": cfg.seed}


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg, args):
    d = cfg.data
    out = Path(cfg.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    if d.source == "synthetic":
        interactions, catalog = generate_synthetic(d.n_users, d.n_items, (d.seq_len_min, d.seq_len_max),
                                                   seed=cfg.seed, n_clusters=d.n_clusters,
                                                   p_within=d.p_within, zipf=d.zipf, n_task=d.n_task)
    else:
        interactions = ingest(d.log_path)
        catalog = read_catalog(d.catalog_path, d.vocab())
    write_log(interactions.sorted(), out / LOG_NAME)
    write_catalog(catalog, out / CATALOG_NAME)
    log.info("wrote %d interactions over %d items to %s", len(interactions), len(catalog), out)
    return 0


def cmd_train(cfg, args):
    tr, va, _, catalog = load_examples(cfg)
    mode = cfg.mode
    init = args.init
    if mode == "earn-no-rt" and init is None:
        init = checkpoint_path(cfg, "vanilla")
        if not init.exists():
            raise DataError(f"earn-no-rt evaluates a vanilla-trained model: pass --init or train {init} first")
    if init is not None:
        weights, _ = _load_weights(cfg, init)
    else:
        weights = init_weights(cfg.model, cfg.registers, seed=cfg.seed)
    valid = _limit(va, cfg.eval.max_examples)

    def eval_fn(w, m):
        res = evaluate(w, cfg.model, cfg.registers, valid, catalog, ks=(10,),
                       beam_width=cfg.eval.beam_width, prune=m != "vanilla", workers=cfg.workers)
        return res[10][0]

    def log_fn(row):
        log.info("epoch %d loss %.4f valid R@10 %.4f", row["epoch"], row["loss"], row["valid_recall10"])

    weights, rows = train(weights, cfg.model, cfg.registers, tr, cfg.train, mode, eval_fn, log_fn)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    checkpoint.save(checkpoint_path(cfg), weights, _meta(cfg, mode))
    with open(Path(cfg.out) / f"train-{mode}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "valid_recall10"])
        for row in rows:
            w.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['valid_recall10']:.6f}"])
    return 0


def cmd_eval(cfg, args):
    _, _, te, catalog = load_examples(cfg)
    path = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    weights, _ = _load_weights(cfg, path)
    ks = sorted(set(cfg.eval.ks))
    res = evaluate(weights, cfg.model, cfg.registers, _limit(te, cfg.eval.max_examples), catalog, ks=ks,
                   beam_width=cfg.eval.beam_width, prune=cfg.mode != "vanilla", workers=cfg.workers)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_metric_report([(cfg.mode, K, *res[K]) for K in ks], Path(cfg.out) / f"metrics-{cfg.mode}.csv")
    for K in ks:
        log.info("%s Recall@%d %.4f NDCG@%d %.4f", cfg.mode, K, res[K][0], K, res[K][1])
    return 0


def cmd_bench(cfg, args):
    b = cfg.bench
    model = cfgmod.bench_model(cfg)
    spec = dataclasses.replace(cfg.registers, k=b.k or cfg.registers.k)
    if args.checkpoint:
        weights, _ = checkpoint.load(args.checkpoint)
        weights.check(model, spec)
    else:
        weights = init_weights(model, spec, seed=cfg.seed)
    results = run_bench(weights, model, spec, methods=b.methods, batch_sizes=b.batch_sizes, lengths=b.lengths,
                        decode_steps=b.decode_steps, repeats=b.repeats, warmup=b.warmup, seed=cfg.seed,
                        workers=cfg.workers, window=(b.window_initial, b.window_recent), cut=b.cut,
                        element_bytes=b.element_bytes,
                        log_fn=lambda r: log.info("%s L=%d B=%d omega %.3f", r.method, r.length, r.batch, r.omega))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_bench_csv(results, Path(cfg.out) / "bench.csv", Path(cfg.out) / "bench_long.txt")
    return 0


def cmd_cost(cfg, args):
    c = cfg.cost
    env = CostEnv(c.v_c, c.v_m, c.element_bytes)
    rows = cost_rows(env, cfgmod.cost_model(cfg), c.ks, c.lengths, c.r, c.n_generate)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_cost_csv(rows, Path(cfg.out) / "cost.csv")
    return 0


def cmd_attn(cfg, args):
    _, _, te, _ = load_examples(cfg)
    if args.checkpoint:
        weights, _ = _load_weights(cfg, args.checkpoint)
    else:
        weights = init_weights(cfg.model, cfg.registers, seed=cfg.seed)
    cutoff = cfg.attn.early_layer_cutoff
    cutoff = cfg.registers.k if cutoff is None else cutoff
    per_example = []
    for ex in te[:cfg.attn.n_examples]:
        s = prefill(weights, cfg.model, None, layout_for(ex, cfg.registers, cfg.model.vocab_size), trace="last")
        per_example.append(summarize(s.traces, cutoff, cfg.attn.epsilon))
    if not per_example:
        raise DataError("no test examples to analyze")
    stats = average(per_example)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_stats_csv(stats, Path(cfg.out) / "attn.csv")
    log.info("sparsity early %.4f latter %.4f", stats.sp_early, stats.sp_latter)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "cost-model": cmd_cost,
    "analyze-attn": cmd_attn,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--mode", choices=["vanilla", "earn", "earn-no-rt"])
    common.add_argument("-q", "--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="earn", description=__doc__.splitlines()[0])
    p.add_argument("--print-schema", action="store_true", help="print the config JSON schema and exit")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--init", type=Path, help="start from this checkpoint")
        if name in ("eval", "bench", "analyze-attn"):
            sp.add_argument("--checkpoint", help="weights to use")
    return p


def resolve_config(args, env=None):
    """Config file, then env overrides, then flags."""
    env = os.environ if env is None else env
    doc = {}
    if args.config:
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"no such file {args.config}", "--config") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON at line {e.lineno}: {e.msg}", "--config") from None
    for key in ("seed", "out", "workers", "mode"):
        val = getattr(args, key)
        if val is not None:
            doc[key] = val
    flag_env = dict(env)
    if args.out is not None:
        flag_env.pop("EARN_OUT", None)
    if args.workers is not None:
        flag_env.pop("EARN_WORKERS", None)
    return cfgmod.from_dict(doc, flag_env)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.print_schema:
        print(cfgmod.schema_json())
        return 0
    if not args.command:
        build_parser().print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, ContractError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
