"""Recall@10 of vanilla, EARN, vanilla-pruned-at-inference and EARN without suffix registers.

Writes one CSV row per (seed, variant) and prints a per-seed summary.

    python scripts/learning_directions.py --seeds 0 1 2 --out runs/directions.csv
"""
import argparse
import csv
from pathlib import Path

from earn.experiments import learning_directions


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--out", type=Path, default=Path("runs/directions.csv"))
    args = p.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "variant", "recall10", "ndcg10", "train_seconds"])
        for seed in args.seeds:
            res = learning_directions(seed, k=args.k, epochs=args.epochs, learning_rate=args.lr)
            for name in ("vanilla", "earn", "no_rt", "no_sr"):
                w.writerow([seed, name, f"{res.recall10[name]:.6f}", f"{res.ndcg10[name]:.6f}",
                            f"{res.seconds.get(name, 0.0):.1f}"])
            f.flush()


if __name__ == "__main__":
    main()
