"""Analytic cost table (attention FLOP savings, cache reduction, speedups) for a 32-layer 7B-class shape.

    python scripts/cost_table.py --ks 4 8 16 --lengths 512 1024 2048 4096
"""
import argparse
from pathlib import Path

from earn.costmodel import TYPICAL, CostEnv, cost_rows, flops_layer, write_cost_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ks", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--lengths", type=int, nargs="+", default=[512, 1024, 2048, 4096])
    p.add_argument("--r", type=int, default=2, help="registers kept above layer k")
    p.add_argument("--out", type=Path, default=Path("runs/cost.csv"))
    args = p.parse_args()
    rows = cost_rows(CostEnv(), TYPICAL, args.ks, args.lengths, args.r)
    print(f"per-layer FLOPs at L=512: {flops_layer(512, TYPICAL):.4g}")
    print(f"{'k':>3} {'L':>5} {'gamma_attn':>10} {'gamma_cache':>11} {'omega':>6} {'omega_time':>10}")
    for r in rows:
        print(f"{r['k']:>3} {r['L']:>5} {r['gamma_attn']:>10.4f} {r['gamma_cache']:>11.4f} "
              f"{r['omega']:>6.2f} {r['omega_time']:>10.2f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_cost_csv(rows, args.out)


if __name__ == "__main__":
    main()
