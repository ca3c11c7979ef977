"""Span loss, gradient clipping, Adam, the epoch loop and a synthetic task."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from . import tensor as tn
from .data import EvalResult, QaExample, align_answer_span, f1_em
from .features import EncodedBatch, IngestionError, TokenFeatures, Vocabulary, tokenize
from .model import Reader, span_search
from .tensor import Tensor

logger = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def span_loss(s: Tensor, e: Tensor, gold_start, gold_end) -> Tensor:
    """Mean over the batch of ``-log s[start] - log e[end]``."""
    single = s.ndim == 1
    if single:
        s = tn.reshape(s, (1, s.shape[0]))
        e = tn.reshape(e, (1, e.shape[0]))
    B, n = s.shape
    gs = np.atleast_1d(np.asarray(gold_start, dtype=np.int64))
    ge = np.atleast_1d(np.asarray(gold_end, dtype=np.int64))
    if gs.shape != (B,) or ge.shape != (B,):
        raise DataError(f"need {B} gold spans, got {gs.shape} / {ge.shape}")
    if (gs < 0).any() or (ge < 0).any() or (gs >= n).any() or (ge >= n).any():
        raise DataError(f"gold index out of range for context length {n}")
    rows = np.arange(B)
    nll = tn.neg(tn.add(tn.log(tn.index(s, (rows, gs))), tn.log(tn.index(e, (rows, ge)))))
    return tn.mean_all(nll)


def _as_list(params) -> list[Tensor]:
    return list(params.values()) if isinstance(params, Mapping) else list(params)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in _as_list(params):
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(params, max_norm: float = 20.0) -> float:
    """Rescale all gradients so their joint l2 norm is at most ``max_norm``.

    Returns the scale applied (1.0 when no clipping was needed).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient; aborting step")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in _as_list(params):
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class OptimState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(opt: OptimState, params: Mapping[str, Tensor], row_masks: Mapping[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update.

    Rows excluded by ``row_masks`` are never touched. A parameter whose
    gradient is missing or identically zero keeps its value; its moments
    still decay.
    """
    row_masks = row_masks or {}
    opt.step += 1
    if opt.step > 10**12:
        raise NumericError("optimizer step counter overflow")
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        if name not in opt.m:
            opt.m[name] = np.zeros(p.shape)
            opt.v[name] = np.zeros(p.shape)
        m, v = opt.m[name], opt.v[name]
        g = p.grad
        if g is None or not g.any():
            m *= b1
            v *= b2
            continue
        rows = row_masks.get(name)
        if rows is not None:
            g = g[rows]
            m_r = b1 * m[rows] + (1 - b1) * g
            v_r = b2 * v[rows] + (1 - b2) * g * g
            m[rows], v[rows] = m_r, v_r
            p.data[rows] -= opt.lr * (m_r / c1) / (np.sqrt(v_r / c2) + opt.eps)
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


@dataclass
class TrainConfig:
    batch_size: int = 32
    clip_norm: float = 20.0
    epochs: int = 30
    seed: int = 0
    lr: float = 0.001

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class TrainExample:
    example: QaExample
    features: TokenFeatures
    start: int
    end: int


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    f1: float | None = None
    em: float | None = None
    losses: list[float] = field(default_factory=list)


class TrainLog:
    """CSV records: kind, epoch, step, loss, grad_norm, clip_scale, f1, em."""

    FIELDS = ("kind", "epoch", "step", "loss", "grad_norm", "clip_scale", "f1", "em")

    def __init__(self, fh: TextIO | None = None):
        self.rows: list[dict] = []
        self._writer = csv.DictWriter(fh, fieldnames=self.FIELDS) if fh is not None else None
        if self._writer is not None:
            self._writer.writeheader()

    def write(self, **row) -> None:
        row = {k: row.get(k, "") for k in self.FIELDS}
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)


def prepare(
    reader: Reader,
    examples: Iterable[QaExample],
    skip_bad: bool = True,
    tags: Mapping[str, tuple[list[str], list[str]]] | None = None,
) -> list[TrainExample]:
    """Featurise and align the first gold answer of each example.

    ``tags`` maps example ids to context-aligned (POS, NER) lists.
    """
    tags = tags or {}
    out = []
    for ex in examples:
        try:
            feats = reader.featurize(ex.context, ex.question, tags.get(ex.id))
            if not ex.answers:
                raise DataError(f"{ex.id}: no answers")
            start, end = align_answer_span(ex.answers[0], feats.context_tokens)
        except (IngestionError, DataError, ValueError) as exc:
            if not skip_bad:
                raise
            logger.warning("skipping %s: %s", ex.id, exc)
            continue
        out.append(TrainExample(ex, feats, start, end))
    return out


def _batches(lengths: Sequence[int], size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar-length examples (less padding per batch)."""
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i : i + size] for i in range(0, len(order), size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def train_step(reader: Reader, batch: Sequence[TrainExample], cfg: TrainConfig, opt: OptimState, rng) -> tuple[float, float, float]:
    params = reader.parameters()
    tn.zero_grads(params.values())
    enc = EncodedBatch.collate([t.features for t in batch])
    s, e = reader.forward(enc, training=True, rng=rng)
    loss = span_loss(s, e, [t.start for t in batch], [t.end for t in batch])
    tn.backward(loss)
    for name, rows in reader.params.row_masks().items():
        g = params[name].grad
        if g is not None:
            g[~rows] = 0.0
    norm = global_grad_norm(params)
    scale = clip_gradients(params, cfg.clip_norm)
    adam_step(opt, params, reader.params.row_masks())
    return loss.item(), norm, scale


def train_epoch(
    reader: Reader,
    data: Sequence[TrainExample],
    cfg: TrainConfig,
    opt: OptimState,
    rng: np.random.Generator,
    *,
    epoch: int = 0,
    dev: Sequence[TrainExample] | None = None,
    log: TrainLog | None = None,
) -> EpochMetrics:
    """One pass over ``data`` in shuffled batches; evaluates on ``dev`` if given."""
    if not data:
        raise DataError("empty training set")
    losses = []
    for idx in _batches([t.features.n for t in data], cfg.batch_size, rng):
        loss, norm, scale = train_step(reader, [data[i] for i in idx], cfg, opt, rng)
        losses.append(loss)
        if log is not None:
            log.write(kind="step", epoch=epoch, step=opt.step, loss=repr(loss), grad_norm=repr(norm), clip_scale=repr(scale))
    metrics = EpochMetrics(epoch, float(np.mean(losses)), losses=losses)
    if dev:
        res = evaluate(reader, dev)
        metrics.f1, metrics.em = res.f1, res.em
    if log is not None:
        log.write(kind="epoch", epoch=epoch, step=opt.step, loss=repr(metrics.mean_loss),
                  f1="" if metrics.f1 is None else repr(metrics.f1),
                  em="" if metrics.em is None else repr(metrics.em))
    return metrics


def predict_batch(reader: Reader, items: Sequence[TrainExample], batch_size: int = 64) -> list[str]:
    texts = []
    with tn.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            s, e = reader.forward(EncodedBatch.collate([t.features for t in chunk]))
            for b, t in enumerate(chunk):
                span = span_search(s.data[b], e.data[b], reader.config.max_span_len, t.features.n)
                toks = t.features.context_tokens
                texts.append(t.features.context[toks[span.start].start : toks[span.end].end])
    return texts


def evaluate(reader: Reader, items: Sequence[TrainExample]) -> EvalResult:
    if not items:
        return EvalResult(0.0, 0.0, 0)
    preds = predict_batch(reader, items)
    f1 = em = 0.0
    for text, t in zip(preds, items):
        a, b = f1_em(text, [ans for ans, _ in t.example.answers])
        f1 += a
        em += b
    return EvalResult(f1 / len(items), em / len(items), len(items))


def fit(
    reader: Reader,
    train: Sequence[TrainExample],
    cfg: TrainConfig,
    dev: Sequence[TrainExample] | None = None,
    log: TrainLog | None = None,
    target_em: float | None = None,
) -> list[EpochMetrics]:
    """Train for ``cfg.epochs`` epochs (stop early once ``target_em`` is met)."""
    rng = np.random.default_rng(cfg.seed)
    opt = OptimState(lr=cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        m = train_epoch(reader, train, cfg, opt, rng, epoch=epoch, dev=dev, log=log)
        logger.info("epoch %d loss %.4f f1 %s em %s", epoch, m.mean_loss, m.f1, m.em)
        history.append(m)
        if target_em is not None and m.em is not None and m.em >= target_em:
            break
    return history


# ---------------------------------------------------------------- synthetic task

_CUES = ("where", "is")


def synth_words(n: int = 800) -> list[str]:
    consonants = "bcdfghklmnprstvz"
    vowels = "aeiou"
    words = []
    for i in range(n):
        k = i
        w = ""
        for _ in range(3):
            w += consonants[k % len(consonants)]
            k //= len(consonants)
            w += vowels[k % len(vowels)]
            k //= len(vowels)
        words.append(w)
    return words


def synth_task(n_examples: int, seed: int = 0, words: Sequence[str] | None = None) -> list[QaExample]:
    """Contexts of 20-60 random words with one planted answer of 1-5 words.

    The question is ``where is`` followed by the answer words; none of the
    answer words occur anywhere else in the context, so the span is unique.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be at least 1")
    rng = np.random.default_rng(seed)
    pool = list(words or synth_words())
    out = []
    for k in range(n_examples):
        n = int(rng.integers(20, 61))
        span_len = int(rng.integers(1, 6))
        answer = [pool[i] for i in rng.choice(len(pool), size=span_len, replace=False)]
        banned = set(answer)
        filler = [w for w in pool if w not in banned]
        ctx = [filler[i] for i in rng.integers(0, len(filler), size=n - span_len)]
        at = int(rng.integers(0, n - span_len + 1))
        words_ = ctx[:at] + answer + ctx[at:]
        context = " ".join(words_)
        char_start = len(" ".join(words_[:at])) + (1 if at else 0)
        text = " ".join(answer)
        assert context[char_start : char_start + len(text)] == text
        out.append(QaExample(f"synth-{seed}-{k}", context, " ".join(_CUES + tuple(answer)), [(text, char_start)]))
    return out


def corpus_counts(examples: Iterable[QaExample]) -> Counter:
    counts: Counter = Counter()
    for ex in examples:
        counts.update(t.text for t in tokenize(ex.context))
        counts.update(t.text for t in tokenize(ex.question))
    return counts


def build_vocab(examples: Iterable[QaExample], embedding_file=None, dim: int = 300) -> Vocabulary:
    return Vocabulary.build(corpus_counts(examples), embedding_file, dim)
