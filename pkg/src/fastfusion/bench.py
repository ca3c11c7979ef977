"""Latency benchmarks for recurrent blocks and the full reader."""

from __future__ import annotations

import hashlib
import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tn
from .model import ModelConfig, Reader
from .recurrent import (
    GruParams,
    LstmParams,
    SruLayerParams,
    bi_sru,
    gru_forward,
    gru_op_count,
    lstm_forward,
    lstm_op_count,
    sru_forward,
    sru_op_count,
)
from .tensor import Tensor

SCHEMA_VERSION = "1"
BLOCKS = ("sru", "bi_sru", "lstm", "gru")
COMPONENTS = (
    "featurize",
    "low_level",
    "high_level",
    "question_understanding",
    "qc_attention",
    "self_attention",
    "answer",
)


class UsageError(ValueError):
    pass


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


@dataclass
class BenchReport:
    block: str
    input_shape: list[int]
    batch: int
    trials: int
    warmup: int
    median_ns: float
    mean_ns: float
    p90_ns: float
    op_counts: dict[str, int]
    checksum: str
    samples_ns: list[int] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls(**json.loads(text))


def _block_runner(block: str, T: int, d: int, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(batch, T, d)))
    if block == "sru":
        p = SruLayerParams.init(d, d, rng)
        return (lambda: sru_forward(p, x)[0].data), sru_op_count(T, d, d)
    if block == "bi_sru":
        pf, pb = SruLayerParams.init(d, d, rng), SruLayerParams.init(d, d, rng)
        ops = {k: 2 * v for k, v in sru_op_count(T, d, d).items()}
        return (lambda: bi_sru(pf, pb, x).data), ops
    if block == "lstm":
        p = LstmParams.init(d, d, rng)
        return (lambda: lstm_forward(p, x).data), lstm_op_count(T, d, d)
    if block == "gru":
        p = GruParams.init(d, d, rng)
        return (lambda: gru_forward(p, x).data), gru_op_count(T, d, d)
    raise UsageError(f"unknown block {block!r}; choose from {', '.join(BLOCKS)}")


def bench_block(
    block: str,
    T: int,
    d: int = 128,
    trials: int = 30,
    warmup: int = 3,
    batch: int = 1,
    seed: int = 0,
) -> BenchReport:
    """Time forward passes of one block on a fixed random input.

    Every timed output must be bit-identical to an untimed reference run;
    otherwise the timings are rejected.
    """
    if trials < 5:
        raise UsageError("trials must be at least 5")
    if warmup < 1:
        raise UsageError("warmup must be at least 1")
    if T < 1 or d < 1 or batch < 1:
        raise UsageError("seq-len, hidden and batch must be positive")
    run, ops = _block_runner(block, T, d, batch, seed)
    samples = []
    with threadpool_limits(limits=1), tn.no_grad():
        reference = run().copy()
        for _ in range(warmup):
            run()
        for _ in range(trials):
            t0 = time.perf_counter_ns()
            out = run()
            samples.append(time.perf_counter_ns() - t0)
            if not np.array_equal(out, reference):
                raise RuntimeError(f"{block}: output changed between trials")
    s = np.asarray(samples, dtype=np.float64)
    return BenchReport(
        block=block,
        input_shape=[T, d],
        batch=batch,
        trials=trials,
        warmup=warmup,
        median_ns=float(np.median(s)),
        mean_ns=float(s.mean()),
        p90_ns=float(np.percentile(s, 90)),
        op_counts=dict(ops),
        checksum=_checksum(reference),
        samples_ns=[int(v) for v in samples],
    )


def format_reports(reports: Sequence[BenchReport]) -> str:
    lines = [f"{'block':<8} {'T':>5} {'d':>5} {'median ms':>10} {'p90 ms':>10} {'matmuls':>8} {'seq steps':>9}"]
    for r in reports:
        lines.append(
            f"{r.block:<8} {r.input_shape[0]:>5} {r.input_shape[1]:>5} "
            f"{r.median_ns / 1e6:>10.3f} {r.p90_ns / 1e6:>10.3f} "
            f"{r.op_counts['matmuls']:>8} {r.op_counts['sequential_steps']:>9}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- whole-model profiling


class Stopwatch:
    """Accumulating per-name timer usable as the reader's ``timer`` hook."""

    def __init__(self):
        self.ns: dict[str, int] = defaultdict(int)

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter_ns()
        try:
            yield
        finally:
            self.ns[name] += time.perf_counter_ns() - t0


@dataclass
class ComponentProfile:
    components_ns: dict[str, float]
    percentages: dict[str, float]
    total_ns: float
    end_to_end_ns: float
    trials: int
    context_len: int
    skipped: list[str] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ComponentProfile":
        return cls(**json.loads(text))

    def table(self) -> str:
        lines = [f"{'component':<24} {'ms':>10} {'%':>7}"]
        for k, v in self.components_ns.items():
            lines.append(f"{k:<24} {v / 1e6:>10.3f} {self.percentages[k]:>7.2f}")
        lines.append(f"{'total (profiled)':<24} {self.total_ns / 1e6:>10.3f}")
        lines.append(f"{'end-to-end (plain)':<24} {self.end_to_end_ns / 1e6:>10.3f}")
        return "\n".join(lines)


def profile_components(
    reader: Reader,
    context: str,
    question: str,
    trials: int = 10,
    skip: Sequence[str] = (),
    warmup: int = 1,
) -> ComponentProfile:
    """Per-component inference time of one prediction, plus the plain
    end-to-end median for comparison.

    Components run strictly one after another, so each timer closes before
    the next opens. ``skip`` drops the named attention stages.
    """
    skip_set = frozenset(skip)
    feats = reader.featurize(context, question)
    per_trial: list[dict[str, int]] = []
    plain = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            reader.predict(context, question)
        for _ in range(trials):
            sw = Stopwatch()
            with sw("featurize"):
                feats = reader.featurize(context, question)
            reader.predict_features(feats, timer=sw, skip=skip_set)
            per_trial.append(dict(sw.ns))
            t0 = time.perf_counter_ns()
            reader.predict(context, question)
            plain.append(time.perf_counter_ns() - t0)
    comps = {k: float(np.mean([t.get(k, 0) for t in per_trial])) for k in COMPONENTS}
    total = sum(comps.values())
    pct = {k: 100.0 * v / total for k, v in comps.items()}
    return ComponentProfile(
        components_ns=comps,
        percentages=pct,
        total_ns=total,
        end_to_end_ns=float(np.median(plain)),
        trials=trials,
        context_len=feats.n,
        skipped=sorted(skip_set),
    )


@dataclass
class LatencyReport:
    median_ms: float
    p90_ms: float
    mean_ms: float
    n: int
    samples_ms: list[float] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def latency_1example(reader: Reader, pairs: Sequence, n_examples: int = 100, warmup: int = 2) -> LatencyReport:
    """Batch-size-one end-to-end latency, featurisation included.

    ``pairs`` holds ``(context, question)`` tuples or objects with
    ``context``/``question`` attributes.
    """
    if not pairs:
        raise UsageError("no examples to time")
    if n_examples < 20:
        raise UsageError("n_examples must be at least 20")
    items = [(p.context, p.question) if hasattr(p, "context") else tuple(p) for p in pairs]
    samples = []
    with threadpool_limits(limits=1):
        for c, q in items[:warmup]:
            reader.predict(c, q)
        for k in range(n_examples):
            c, q = items[k % len(items)]
            t0 = time.perf_counter_ns()
            reader.predict(c, q)
            samples.append((time.perf_counter_ns() - t0) / 1e6)
    s = np.asarray(samples)
    return LatencyReport(float(np.median(s)), float(np.percentile(s, 90)), float(s.mean()), n_examples, samples)


def random_reader(config: ModelConfig, seed: int = 0, n_words: int = 800) -> Reader:
    """Untrained reader over the synthetic word list (for timing only)."""
    from collections import Counter

    from .features import Vocabulary
    from .training import synth_words

    words = synth_words(n_words)
    vocab = Vocabulary.build(Counter({w: 1 for w in words + ["where", "is"]}), dim=config.emb_dim)
    return Reader.create(config, vocab, seed=seed)


def synthetic_pair(context_len: int, question_len: int = 8, seed: int = 0) -> tuple[str, str]:
    from .training import synth_words

    rng = np.random.default_rng(seed)
    words = synth_words()
    ctx = " ".join(words[i] for i in rng.integers(0, len(words), size=context_len))
    q = " ".join(words[i] for i in rng.integers(0, len(words), size=question_len))
    return ctx, q
