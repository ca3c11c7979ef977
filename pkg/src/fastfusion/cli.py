"""Command line entry points: bench, profile, train, eval, predict, latency."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .data import evaluate_predictions, load_squad_json, write_predictions
from .features import TagVocab, read_tag_sidecar
from .model import ModelConfig, Reader, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainLog, build_vocab, fit, predict_batch, prepare, synth_task

log = logging.getLogger("fastfusion")


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")


def cmd_bench(args) -> int:
    reports = [
        bench.bench_block(b, T, d=args.hidden, trials=args.trials, warmup=args.warmup, batch=args.batch, seed=args.seed)
        for b in args.block
        for T in args.seq_len
    ]
    if args.out:
        payload = reports[0].to_json() if len(reports) == 1 else json.dumps([json.loads(r.to_json()) for r in reports])
        _write(args.out, payload)
    if args.table or not args.out:
        print(bench.format_reports(reports))
    return 0


def _reader_for_timing(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    return bench.random_reader(ModelConfig(sru_hidden=args.hidden), seed=args.seed)


def cmd_profile(args) -> int:
    reader = _reader_for_timing(args)
    context, question = bench.synthetic_pair(args.context_len, seed=args.seed)
    prof = bench.profile_components(reader, context, question, trials=args.trials, skip=args.skip or ())
    _write(args.out, prof.to_json())
    if args.table or not args.out:
        print(prof.table())
    return 0


def _load_data(args):
    if args.synthetic:
        return synth_task(args.synthetic, seed=args.seed)
    if not args.data:
        raise SystemExit("train: one of --data or --synthetic is required")
    return load_squad_json(args.data)


def cmd_train(args) -> int:
    examples = _load_data(args)
    if args.dev:
        dev_examples = load_squad_json(args.dev)
    elif args.synthetic:
        dev_examples = synth_task(args.dev_size, seed=args.seed + 1)
    else:
        dev_examples = []
    records = read_tag_sidecar(args.tags) if args.tags else {}
    tags = TagVocab.from_sidecar(records) if records else TagVocab()
    vocab = build_vocab(examples, args.embeddings)
    reader = Reader.create(ModelConfig(sru_hidden=args.hidden), vocab, tags, seed=args.seed)
    train = prepare(reader, examples, tags=records)
    dev = prepare(reader, dev_examples, tags=records)
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    log_fh = open(args.log, "w", newline="", encoding="utf-8") if args.log else None
    try:
        history = fit(reader, train, cfg, dev or None, TrainLog(log_fh), target_em=args.target_em)
    finally:
        if log_fh:
            log_fh.close()
    for m in history:
        print(f"epoch {m.epoch}: loss {m.mean_loss:.4f} f1 {m.f1} em {m.em}")
    save_checkpoint(args.out, reader)
    print(f"saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    reader = load_checkpoint(args.checkpoint)
    examples = load_squad_json(args.data)
    items = prepare(reader, examples)
    texts = predict_batch(reader, items)
    preds = {t.example.id: text for t, text in zip(items, texts)}
    for ex in examples:
        preds.setdefault(ex.id, "")
    if args.predictions_out:
        write_predictions(args.predictions_out, preds)
    res = evaluate_predictions(examples, preds)
    print(json.dumps({"f1": 100 * res.f1, "exact_match": 100 * res.em, "n": res.n}))
    return 0


def cmd_predict(args) -> int:
    reader = load_checkpoint(args.checkpoint)
    pred = reader.predict(args.context, args.question)
    print(json.dumps({
        "answer": pred.text,
        "start": pred.span.start,
        "end": pred.span.end,
        "score": pred.span.score,
        "char_span": list(pred.span.char_span),
    }))
    return 0


def cmd_latency(args) -> int:
    reader = _reader_for_timing(args)
    if args.data:
        pairs = load_squad_json(args.data)
    else:
        pairs = [bench.synthetic_pair(args.context_len, seed=args.seed + k) for k in range(args.n)]
    rep = bench.latency_1example(reader, pairs, n_examples=args.n)
    _write(args.out, rep.to_json())
    print(f"1-example latency over {rep.n} runs: median {rep.median_ms:.3f} ms, p90 {rep.p90_ms:.3f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastfusion", description="SRU reader: benchmarks, training, inference.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    b = sub.add_parser("bench", help="time recurrent blocks")
    b.add_argument("--block", nargs="+", default=["sru"], choices=bench.BLOCKS)
    b.add_argument("--seq-len", nargs="+", type=int, default=[64])
    b.add_argument("--hidden", type=int, default=128)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.add_argument("--table", action="store_true")
    b.set_defaults(func=cmd_bench)

    pr = sub.add_parser("profile", help="per-component inference time")
    pr.add_argument("--checkpoint")
    pr.add_argument("--context-len", type=int, default=400)
    pr.add_argument("--hidden", type=int, default=125)
    pr.add_argument("--trials", type=int, default=10)
    pr.add_argument("--skip", nargs="*", choices=("qc_attention", "self_attention"))
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    pr.add_argument("--table", action="store_true")
    pr.set_defaults(func=cmd_profile)

    t = sub.add_parser("train", help="train a reader")
    t.add_argument("--data", help="SQuAD v1.1 training JSON")
    t.add_argument("--synthetic", type=int, metavar="N", help="train on N generated examples instead")
    t.add_argument("--dev", help="SQuAD v1.1 dev JSON evaluated after each epoch")
    t.add_argument("--dev-size", type=int, default=200)
    t.add_argument("--embeddings", help="word vector text file")
    t.add_argument("--tags", help="POS/NER sidecar file")
    t.add_argument("--hidden", type=int, default=125)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--target-em", type=float)
    t.add_argument("--log", help="CSV training log")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="predict and score a SQuAD file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--predictions-out")
    e.set_defaults(func=cmd_eval)

    pd = sub.add_parser("predict", help="answer one question")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--context", required=True)
    pd.add_argument("--question", required=True)
    pd.set_defaults(func=cmd_predict)

    la = sub.add_parser("latency", help="1-example latency")
    la.add_argument("--checkpoint")
    la.add_argument("--data")
    la.add_argument("--n", type=int, default=100)
    la.add_argument("--hidden", type=int, default=125)
    la.add_argument("--context-len", type=int, default=150)
    la.add_argument("--seed", type=int, default=0)
    la.add_argument("--out")
    la.set_defaults(func=cmd_latency)
    return p


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except bench.UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
