"""The full reader: input features, fused encoders, attention, span scoring."""

from __future__ import annotations

import json
import struct
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as tn
from .attention import AttnParams, SummaryParams, attn, question_summary
from .features import (
    EncodedBatch,
    TagEmbeddings,
    TagVocab,
    TokenFeatures,
    Vocabulary,
    build_inputs,
    context_width,
    featurize,
)
from .recurrent import BiLayer, GruParams, gru_cell, init_stack, stacked_bi_sru
from .tensor import DegenerateError, Tensor


class ConfigError(ValueError):
    """Layer widths do not chain."""


@dataclass
class ModelConfig:
    sru_hidden: int = 125
    emb_dim: int = 300
    d_attn: int | None = None  # defaults to the encoder output width
    dropout_input: float = 0.4
    dropout_sru: float = 0.2
    max_span_len: int = 15
    layers_per_block: int = 2
    cell: str = "sru"

    def __post_init__(self):
        for name in ("sru_hidden", "emb_dim", "max_span_len", "layers_per_block"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_attn is not None and self.d_attn < 1:
            raise ConfigError("d_attn must be positive")
        if self.cell not in ("sru", "lstm"):
            raise ConfigError(f"unknown recurrent cell {self.cell!r}")

    @property
    def out_width(self) -> int:
        return 2 * self.sru_hidden

    @property
    def attn_width(self) -> int:
        return self.d_attn or self.out_width

    def widths(self) -> dict[str, int]:
        out = self.out_width
        return {
            "C_in": context_width(self.emb_dim),
            "Q_in": self.emb_dim,
            "bisru_out": out,
            "Q_u_in": 2 * out,
            "C_His": self.emb_dim + 2 * out,
            "C_v_in": 5 * out,
            "C_His2": self.emb_dim + 6 * out,
            "C_u_in": 2 * out,
        }


BLOCKS = ("low_c", "low_q", "high_c", "high_q", "und_q", "fuse_c", "final_c")
QC_ATTN = ("qc_low", "qc_high", "qc_und")


@dataclass
class ModelParams:
    embeddings: Tensor
    tune_mask: np.ndarray
    tags: TagEmbeddings
    soft_match: AttnParams
    blocks: dict[str, list[BiLayer]]
    qc_attn: dict[str, AttnParams]
    self_attn: AttnParams
    summary: SummaryParams
    W_start: Tensor
    W_end: Tensor
    gru: GruParams

    @classmethod
    def init(cls, cfg: ModelConfig, vocab: Vocabulary, tags: TagVocab, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        if vocab.dim != cfg.emb_dim:
            raise ConfigError(f"vocabulary vectors are {vocab.dim}-d, config says {cfg.emb_dim}")
        w = cfg.widths()
        h, out, L = cfg.sru_hidden, cfg.out_width, cfg.layers_per_block
        block_in = {
            "low_c": w["C_in"],
            "low_q": w["Q_in"],
            "high_c": out,
            "high_q": out,
            "und_q": w["Q_u_in"],
            "fuse_c": w["C_v_in"],
            "final_c": w["C_u_in"],
        }
        blocks = {k: init_stack(d, h, L, rng, cfg.cell) for k, d in block_in.items()}
        bound = np.sqrt(1.0 / out)
        params = cls(
            embeddings=tn.parameter(vocab.embeddings.copy(), "embeddings"),
            tune_mask=vocab.tune_mask(),
            tags=TagEmbeddings.init(tags, rng),
            soft_match=AttnParams.init(cfg.emb_dim, cfg.attn_width, rng),
            blocks=blocks,
            qc_attn={k: AttnParams.init(w["C_His"], cfg.attn_width, rng) for k in QC_ATTN},
            self_attn=AttnParams.init(w["C_His2"], cfg.attn_width, rng),
            summary=SummaryParams.init(out, rng),
            W_start=tn.parameter(rng.uniform(-bound, bound, size=(out, out))),
            W_end=tn.parameter(rng.uniform(-bound, bound, size=(out, out))),
            gru=GruParams.init(out, out, rng),
        )
        params.audit(cfg)
        return params

    def audit(self, cfg: ModelConfig) -> dict[str, int]:
        """Check every width in the stack against the config; returns the widths."""
        w = cfg.widths()
        out = cfg.out_width
        expect_in = {
            "low_c": w["C_in"],
            "low_q": w["Q_in"],
            "high_c": out,
            "high_q": out,
            "und_q": w["Q_u_in"],
            "fuse_c": w["C_v_in"],
            "final_c": w["C_u_in"],
        }
        for name, d in expect_in.items():
            layers = self.blocks[name]
            if len(layers) != cfg.layers_per_block:
                raise ConfigError(f"{name}: {len(layers)} layers, expected {cfg.layers_per_block}")
            width = d
            for i, layer in enumerate(layers):
                if layer.d_in != width:
                    raise ConfigError(f"{name}[{i}] takes {layer.d_in}, receives {width}")
                width = layer.d_out
            if width != out:
                raise ConfigError(f"{name} emits {width}, expected {out}")
        if self.embeddings.shape[1] != cfg.emb_dim or self.soft_match.d_in != cfg.emb_dim:
            raise ConfigError("embedding width mismatch")
        for k, a in self.qc_attn.items():
            if a.d_in != w["C_His"]:
                raise ConfigError(f"{k} takes {a.d_in}, history is {w['C_His']}")
        if self.self_attn.d_in != w["C_His2"]:
            raise ConfigError(f"self attention takes {self.self_attn.d_in}, history is {w['C_His2']}")
        if self.summary.v.shape != (out,) or self.W_start.shape != (out, out) or self.W_end.shape != (out, out):
            raise ConfigError("answer layer width mismatch")
        if (self.gru.d_in, self.gru.d_h) != (out, out):
            raise ConfigError("GRU width mismatch")
        return w

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embeddings": self.embeddings}
        for k, t in self.tags.named().items():
            out[f"tags.{k}"] = t
        out["soft_match.W"] = self.soft_match.W
        for name, layers in self.blocks.items():
            for i, layer in enumerate(layers):
                for side, p in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                    for k, t in p.named().items():
                        out[f"{name}.{i}.{side}.{k}"] = t
        for name, a in self.qc_attn.items():
            out[f"{name}.W"] = a.W
        out["self_attn.W"] = self.self_attn.W
        out["summary.v"] = self.summary.v
        out["W_start"] = self.W_start
        out["W_end"] = self.W_end
        for k, t in self.gru.named().items():
            out[f"gru.{k}"] = t
        return out

    def row_masks(self) -> dict[str, np.ndarray]:
        """Per-parameter trainable-row masks (only the embedding table has one)."""
        return {"embeddings": self.tune_mask}


class SpanPrediction(NamedTuple):
    start: int
    end: int
    score: float
    char_span: tuple[int, int] | None = None


class Encoded(NamedTuple):
    C_u: Tensor
    Q_u: Tensor
    q: Tensor
    c_mask: np.ndarray
    q_mask: np.ndarray


Timer = Callable[[str], object]


def _no_timer(name: str):
    return nullcontext()


def _rows(x: Tensor) -> Tensor:
    return x if x.ndim == 3 else tn.reshape(x, (1,) + x.shape)


def encode(
    cfg: ModelConfig,
    params: ModelParams,
    C_in: Tensor,
    Q_in: Tensor,
    c_mask,
    q_mask,
    *,
    C_glove: Tensor | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    timer: Timer = _no_timer,
    skip: frozenset[str] = frozenset(),
) -> Encoded:
    """Encoder stack from input features to ``(C_u, Q_u, q)``.

    ``C_glove`` defaults to the first ``emb_dim`` columns of ``C_in``.
    ``skip`` replaces the named attention stages with zeros (profiling only).
    """
    C_in, Q_in = _rows(C_in), _rows(Q_in)
    B, n, _ = C_in.shape
    m = Q_in.shape[1]
    c_mask = np.ones((B, n), bool) if c_mask is None else np.asarray(c_mask, bool).reshape(B, n)
    q_mask = np.ones((B, m), bool) if q_mask is None else np.asarray(q_mask, bool).reshape(B, m)
    w = cfg.widths()
    if C_in.shape[-1] != w["C_in"] or Q_in.shape[-1] != w["Q_in"]:
        raise ConfigError(f"inputs are {C_in.shape[-1]}/{Q_in.shape[-1]}-wide, expected {w['C_in']}/{w['Q_in']}")
    if C_glove is None:
        C_glove = tn.slice_axis(C_in, 0, cfg.emb_dim)
    Q_glove = Q_in
    out = cfg.out_width
    p_sru = cfg.dropout_sru
    p_in = cfg.dropout_input

    def stack(name, x, mask):
        return stacked_bi_sru(params.blocks[name], x, mask, p_sru, rng, training)

    with timer("low_level"):
        C_l = stack("low_c", C_in, c_mask)
        Q_l = stack("low_q", Q_in, q_mask)
    with timer("high_level"):
        C_h = stack("high_c", C_l, c_mask)
        Q_h = stack("high_q", Q_l, q_mask)
    with timer("question_understanding"):
        Q_u = stack("und_q", tn.concat([Q_l, Q_h]), q_mask)
    with timer("qc_attention"):
        C_his = tn.concat([C_glove, C_l, C_h])
        Q_his = tn.concat([Q_glove, Q_l, Q_h])
        if C_his.shape[-1] != w["C_His"]:
            raise ConfigError(f"C_His is {C_his.shape[-1]}-wide, expected {w['C_His']}")
        hats = []
        for key, values in zip(QC_ATTN, (Q_l, Q_h, Q_u)):
            if "qc_attention" in skip:
                hats.append(Tensor(np.zeros((B, n, out))))
            else:
                hats.append(
                    attn(params.qc_attn[key], C_his, Q_his, values, q_mask,
                         dropout=p_in, rng=rng, training=training)
                )
        C_v = stack("fuse_c", tn.concat([C_l, C_h] + hats), c_mask)
    with timer("self_attention"):
        C_his2 = tn.concat([C_glove, C_l, C_h] + hats + [C_v])
        if C_his2.shape[-1] != w["C_His2"]:
            raise ConfigError(f"C_His2 is {C_his2.shape[-1]}-wide, expected {w['C_His2']}")
        if "self_attention" in skip:
            C_v_hat = Tensor(np.zeros((B, n, out)))
        else:
            C_v_hat = attn(params.self_attn, C_his2, C_his2, C_v, c_mask,
                           dropout=p_in, rng=rng, training=training)
        C_u = stack("final_c", tn.concat([C_v, C_v_hat]), c_mask)
    with timer("answer"):
        q = question_summary(params.summary, Q_u, q_mask)
    return Encoded(C_u, Q_u, q, c_mask, q_mask)


def _bilinear_softmax(query: Tensor, W: Tensor, C_u: Tensor, mask) -> Tensor:
    B, n, d = C_u.shape
    qW = tn.reshape(tn.matmul(query, W), (B, d, 1))
    scores = tn.reshape(tn.matmul(C_u, qW), (B, n))
    return tn.softmax_rows(scores, mask)


def answer_scores(params: ModelParams, C_u: Tensor, Q_u: Tensor, q: Tensor, mask=None):
    """Start and end distributions over context positions.

    Accepts single examples ((n, d), (m, d), (d,)) or batches.
    """
    single = C_u.ndim == 2
    C_u = _rows(C_u)
    B, n, d = C_u.shape
    if n == 0:
        raise DegenerateError("empty context")
    if q.ndim == 1:
        q = tn.reshape(q, (1, d))
    mask = None if mask is None else np.asarray(mask, bool).reshape(B, n)
    s = _bilinear_softmax(q, params.W_start, C_u, mask)
    z = tn.reshape(tn.matmul(tn.reshape(s, (B, 1, n)), C_u), (B, d))
    q_hat = gru_cell(params.gru, z, q)
    e = _bilinear_softmax(q_hat, params.W_end, C_u, mask)
    if single:
        return tn.reshape(s, (n,)), tn.reshape(e, (n,))
    return s, e


def span_search(s, e, max_len: int = 15, length: int | None = None) -> SpanPrediction:
    """Best ``s_i * e_j`` with ``i <= j < i + max_len``; earliest span wins ties."""
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64).reshape(-1)
    e = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64).reshape(-1)
    n = len(s) if length is None else int(length)
    if n <= 0:
        raise DegenerateError("span_search over an empty context")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    s, e = s[:n], e[:n]
    scores = np.outer(s, e)
    i, j = np.indices((n, n))
    scores[(j < i) | (j >= i + max_len)] = -np.inf
    best = int(np.argmax(scores))
    start, end = divmod(best, n)
    return SpanPrediction(start, end, float(scores[start, end]))


class Prediction(NamedTuple):
    span: SpanPrediction
    text: str


@dataclass
class Reader:
    """Model plus the vocabularies it was built with."""

    config: ModelConfig
    params: ModelParams
    vocab: Vocabulary
    tags: TagVocab = field(default_factory=TagVocab)

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, tags: TagVocab | None = None, seed: int = 0):
        tags = tags or TagVocab()
        return cls(config, ModelParams.init(config, vocab, tags, seed), vocab, tags)

    def parameters(self) -> dict[str, Tensor]:
        return self.params.named_parameters()

    def featurize(self, context: str, question: str, context_tags=None) -> TokenFeatures:
        return featurize(context, question, self.vocab, self.tags, context_tags)

    def forward(
        self,
        batch: EncodedBatch,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        timer: Timer = _no_timer,
        skip: frozenset[str] = frozenset(),
    ) -> tuple[Tensor, Tensor]:
        cfg, p = self.config, self.params
        with timer("featurize"):
            inputs = build_inputs(
                batch, p.embeddings, p.tags, p.soft_match,
                dropout=cfg.dropout_input, rng=rng, training=training,
            )
        enc = encode(
            cfg, p, inputs.C_in, inputs.Q_in, inputs.c_mask, inputs.q_mask,
            C_glove=inputs.C_glove, training=training, rng=rng, timer=timer, skip=skip,
        )
        with timer("answer"):
            return answer_scores(p, enc.C_u, enc.Q_u, enc.q, enc.c_mask)

    def predict_features(self, feats: TokenFeatures, timer: Timer = _no_timer, skip=frozenset()) -> Prediction:
        with timer("featurize"):
            batch = EncodedBatch.collate([feats])
        with tn.no_grad():
            s, e = self.forward(batch, timer=timer, skip=skip)
        with timer("answer"):
            span = span_search(s.data[0], e.data[0], self.config.max_span_len, feats.n)
        a, b = feats.context_tokens[span.start].start, feats.context_tokens[span.end].end
        return Prediction(span._replace(char_span=(a, b)), feats.context[a:b])

    def predict(self, context: str, question: str, context_tags=None, timer: Timer = _no_timer) -> Prediction:
        with timer("featurize"):
            feats = self.featurize(context, question, context_tags)
        return self.predict_features(feats, timer=timer)


def predict(reader: Reader, context: str, question: str, context_tags=None) -> Prediction:
    return reader.predict(context, question, context_tags)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FFNCKPT1"


def save_checkpoint(path: str | Path, reader: Reader) -> None:
    """Flat binary: magic, JSON header, then (name, shape, float64 data) records."""
    named = reader.parameters()
    header = {
        "config": asdict(reader.config),
        "vocab": reader.vocab.tokens,
        "tune_ids": reader.vocab.tune_ids.tolist(),
        "pos_tags": reader.tags.pos,
        "ner_tags": reader.tags.ner,
        "params": list(named),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, t in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> Reader:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for _ in header["params"]:
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arrays[name] = data.reshape(shape).astype(np.float64)
    cfg = ModelConfig(**header["config"])
    tokens = header["vocab"]
    vocab = Vocabulary(tokens, arrays["embeddings"].copy(), np.array(header["tune_ids"], dtype=np.int64))
    tags = TagVocab(header["pos_tags"], header["ner_tags"])
    reader = Reader.create(cfg, vocab, tags)
    named = reader.parameters()
    if set(named) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the config")
    for name, t in named.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    return reader
