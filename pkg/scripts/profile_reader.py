"""Per-component inference profile plus 1-example latency, SRU reader vs an LSTM stand-in.

    python3 scripts/profile_reader.py --context-len 400
"""

import argparse

from fastfusion.bench import latency_1example, profile_components, random_reader, synthetic_pair
from fastfusion.model import ModelConfig, load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--hidden", type=int, default=125)
    ap.add_argument("--context-len", type=int, default=400)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--n", type=int, default=40)
    args = ap.parse_args()

    reader = load_checkpoint(args.checkpoint) if args.checkpoint else random_reader(ModelConfig(sru_hidden=args.hidden))
    ctx, q = synthetic_pair(args.context_len)
    print(profile_components(reader, ctx, q, trials=args.trials).table())

    pairs = [synthetic_pair(args.context_len, seed=k) for k in range(5)]
    h = reader.config.sru_hidden
    lstm = random_reader(ModelConfig(sru_hidden=2 * h, emb_dim=reader.config.emb_dim, cell="lstm", layers_per_block=1))
    for name, r in (("sru", reader), (f"lstm (hidden {2 * h}, 1 layer/block)", lstm)):
        rep = latency_1example(r, pairs, n_examples=args.n)
        print(f"{name:<32} median {rep.median_ms:8.2f} ms   p90 {rep.p90_ms:8.2f} ms")


if __name__ == "__main__":
    main()
