"""Latency of SRU, BiSRU, GRU and LSTM forward passes over a sweep of sequence lengths.

    python3 scripts/bench_blocks.py --seq-len 16 64 256 1024 --out blocks.json
"""

import argparse
import json

from fastfusion.bench import BLOCKS, bench_block, format_reports


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seq-len", type=int, nargs="+", default=[16, 64, 256, 1024])
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--out")
    args = ap.parse_args()

    reports = [bench_block(b, T, d=args.hidden, trials=args.trials, batch=args.batch) for T in args.seq_len for b in BLOCKS]
    print(format_reports(reports))
    by = {(r.block, r.input_shape[0]): r.median_ns for r in reports}
    print("\nmedian latency relative to sru:")
    for T in args.seq_len:
        print(f"  T={T:5d}  " + "  ".join(f"{b} {by[b, T] / by['sru', T]:.2f}x" for b in BLOCKS if b != "sru"))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([json.loads(r.to_json()) for r in reports], fh, indent=1)


if __name__ == "__main__":
    main()
