"""Train a small reader on the planted-span task and report held-out EM per epoch.

    python3 scripts/train_synthetic.py --examples 2000 --hidden 32 --out synth.ckpt
"""

import argparse
import logging
import time

from fastfusion.features import TagVocab
from fastfusion.model import ModelConfig, Reader, save_checkpoint
from fastfusion.training import TrainConfig, TrainLog, build_vocab, fit, prepare, synth_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=2000)
    ap.add_argument("--dev", type=int, default=200)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target-em", type=float, default=0.95)
    ap.add_argument("--log", help="CSV of per-step losses")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    examples = synth_task(args.examples + args.dev, seed=args.seed)
    train_ex, dev_ex = examples[: args.examples], examples[args.examples :]
    reader = Reader.create(ModelConfig(sru_hidden=args.hidden), build_vocab(train_ex), TagVocab(), seed=args.seed)
    train, dev = prepare(reader, train_ex), prepare(reader, dev_ex)
    t0 = time.perf_counter()
    fh = open(args.log, "w", newline="") if args.log else None
    try:
        history = fit(reader, train, TrainConfig(epochs=args.epochs, seed=args.seed), dev, TrainLog(fh), args.target_em)
    finally:
        if fh:
            fh.close()
    for m in history:
        print(f"epoch {m.epoch:2d}  loss {m.mean_loss:.4f}  dev f1 {m.f1:.3f}  em {m.em:.3f}")
    print(f"wall clock {time.perf_counter() - t0:.1f}s")
    if args.out:
        save_checkpoint(args.out, reader)


if __name__ == "__main__":
    main()
