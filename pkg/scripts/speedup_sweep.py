"""Wall-clock comparison of EARN against vanilla and the two baselines on a 16-layer toy model.

    python scripts/speedup_sweep.py --lengths 1024 2048 4096 --methods vanilla earn skiplayers window
"""
import argparse
from pathlib import Path

from earn.bench import METHODS, write_bench_csv
from earn.experiments import speedup_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048, 4096])
    p.add_argument("--methods", nargs="+", choices=METHODS, default=["vanilla", "earn"])
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--cut", type=int, default=None, help="layer count for skiplayers (default: k)")
    p.add_argument("--window", type=int, nargs=2, default=[4, 64], metavar=("INITIAL", "RECENT"))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--decode-steps", type=int, default=4)
    p.add_argument("--out", type=Path, default=Path("runs/speedup.csv"))
    args = p.parse_args()

    def show(r):
        print(f"{r.method:>10} L={r.length:<5} {r.seconds:8.3f}s omega={r.omega:5.2f} "
              f"gamma={r.gamma_pct:5.1f}% {r.status}", flush=True)

    res = speedup_sweep(lengths=args.lengths, k=args.k, repeats=args.repeats, warmup=args.warmup,
                        decode_steps=args.decode_steps, methods=args.methods, cut=args.cut or args.k,
                        window=args.window, log_fn=show)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(res, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
