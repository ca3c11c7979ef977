"""Tokenisation and the 624-d context / 300-d question input features."""

from __future__ import annotations

import hashlib
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as tn
from .attention import AttnParams, word_level_soft_match
from .recurrent import variational_dropout
from .tensor import Tensor

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
EMB_DIM = 300
POS_DIM = 12
NER_DIM = 8
TF_DIM = 1
MATCH_DIM = 3
N_TUNE = 1000


class IngestionError(ValueError):
    """Raw text could not be turned into model inputs."""


class Token(NamedTuple):
    text: str
    start: int
    end: int


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[Token]:
    """Whitespace split with leading/trailing punctuation split off, one char each."""
    tokens: list[Token] = []
    for m in re.finditer(r"\S+", text):
        s, e = m.start(), m.end()
        lead = []
        while s < e and _is_punct(text[s]):
            lead.append(Token(text[s], s, s + 1))
            s += 1
        trail = []
        while e > s and _is_punct(text[e - 1]):
            trail.append(Token(text[e - 1], e - 1, e))
            e -= 1
        tokens.extend(lead)
        if s < e:
            tokens.append(Token(text[s:e], s, e))
        tokens.extend(reversed(trail))
    return tokens


def lemmatize(word: str) -> str:
    # plural -s/-es, -ing, -ed only; irregular forms pass through lowercased
    w = word.lower()
    if len(w) > 4 and w.endswith("ies"):
        return w[:-3] + "y"
    if len(w) > 4 and w.endswith(("ches", "shes", "sses", "xes", "zes")):
        return w[:-2]
    if len(w) > 3 and w.endswith("s") and not w.endswith(("ss", "us", "is")):
        return w[:-1]
    if len(w) > 5 and w.endswith("ing"):
        return w[:-3]
    if len(w) > 4 and w.endswith("ed"):
        return w[:-2]
    return w


def _words(tokens: Sequence) -> list[str]:
    return [t.text if isinstance(t, Token) else str(t) for t in tokens]


def hard_match(context_tokens: Sequence, question_tokens: Sequence) -> Tensor:
    """(n, 3) flags: exact form, lowercase form, lemma found in the question."""
    ctx = _words(context_tokens)
    qs = _words(question_tokens)
    exact = set(qs)
    lower = {w.lower() for w in qs}
    lemma = {lemmatize(w) for w in qs}
    out = np.zeros((len(ctx), MATCH_DIM))
    for i, w in enumerate(ctx):
        out[i, 0] = w in exact
        out[i, 1] = w.lower() in lower
        out[i, 2] = lemmatize(w) in lemma
    return Tensor(out)


def term_frequency(context_tokens: Sequence) -> Tensor:
    """Lowercase-form count over context length, shape (n, 1)."""
    words = [w.lower() for w in _words(context_tokens)]
    n = len(words)
    counts = Counter(words)
    return Tensor(np.array([[counts[w] / n] for w in words]).reshape(n, 1))


# ---------------------------------------------------------------- vocabulary


def hashed_vector(token: str, dim: int = EMB_DIM) -> np.ndarray:
    """Deterministic stand-in embedding for a token with no pretrained vector."""
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).normal(0.0, 0.3, size=dim)


def load_embedding_file(path: str | Path, words: Iterable[str] | None = None, dim: int = EMB_DIM):
    """Read ``token f1 ... f_dim`` lines; keep only ``words`` when given."""
    wanted = None if words is None else set(words)
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) < dim + 1:
                continue
            token = " ".join(parts[: len(parts) - dim])
            if wanted is not None and token not in wanted:
                continue
            try:
                vectors[token] = np.array(parts[-dim:], dtype=np.float64)
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: bad embedding values") from exc
    return vectors


@dataclass
class Vocabulary:
    tokens: list[str]
    embeddings: np.ndarray
    tune_ids: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with the pad and unknown tokens")
        if len(self.tune_ids) > N_TUNE + 2:
            raise ValueError("too many tunable rows")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def lookup(self, word: str) -> int:
        return self.index.get(word, UNK)

    def ids(self, words: Sequence[str]) -> np.ndarray:
        return np.array([self.lookup(w) for w in words], dtype=np.int64)

    def tune_mask(self) -> np.ndarray:
        m = np.zeros(len(self.tokens), dtype=bool)
        m[self.tune_ids] = True
        return m

    @classmethod
    def build(
        cls,
        counts: Counter,
        embedding_file: str | Path | None = None,
        dim: int = EMB_DIM,
        n_tune: int = N_TUNE,
    ) -> "Vocabulary":
        """Vocabulary over every counted word; the ``n_tune`` most frequent
        (ties broken lexicographically) plus pad/unk stay trainable."""
        words = sorted(w for w in counts if w not in (PAD_TOKEN, UNK_TOKEN))
        pretrained = load_embedding_file(embedding_file, words, dim) if embedding_file else {}
        tokens = [PAD_TOKEN, UNK_TOKEN] + words
        table = np.zeros((len(tokens), dim))
        table[UNK] = hashed_vector(UNK_TOKEN, dim)
        for i, w in enumerate(words, start=2):
            table[i] = pretrained[w] if w in pretrained else hashed_vector(w, dim)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n_tune]
        index = {w: i for i, w in enumerate(tokens)}
        tune = sorted({PAD, UNK} | {index[w] for w, _ in ranked if w in index})
        return cls(tokens, table, np.array(tune, dtype=np.int64))


@dataclass
class TagVocab:
    """Tag names for POS and NER; index 0 is the "no tag" fallback."""

    pos: list[str] = field(default_factory=lambda: ["<none>"])
    ner: list[str] = field(default_factory=lambda: ["<none>"])

    def pos_ids(self, tags: Sequence[str] | None, n: int) -> np.ndarray:
        return self._ids(self.pos, tags, n)

    def ner_ids(self, tags: Sequence[str] | None, n: int) -> np.ndarray:
        return self._ids(self.ner, tags, n)

    @staticmethod
    def _ids(names: list[str], tags, n: int) -> np.ndarray:
        if tags is None:
            return np.zeros(n, dtype=np.int64)
        if len(tags) != n:
            raise IngestionError(f"tag list has {len(tags)} entries for {n} tokens")
        lookup = {t: i for i, t in enumerate(names)}
        return np.array([lookup.get(t, 0) for t in tags], dtype=np.int64)

    @classmethod
    def from_sidecar(cls, records: dict[str, tuple[list[str], list[str]]]) -> "TagVocab":
        pos = sorted({t for p, _ in records.values() for t in p})
        ner = sorted({t for _, e in records.values() for t in e})
        return cls(["<none>"] + pos, ["<none>"] + ner)


def read_tag_sidecar(path: str | Path) -> dict[str, tuple[list[str], list[str]]]:
    """Parse ``id<TAB>POS POS ...<TAB>NER NER ...`` lines (token aligned)."""
    records = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestionError(f"{path}:{lineno}: expected 3 tab-separated fields")
            pos, ner = parts[1].split(), parts[2].split()
            if len(pos) != len(ner):
                raise IngestionError(f"{path}:{lineno}: POS and NER lists differ in length")
            records[parts[0]] = (pos, ner)
    return records


def write_tag_sidecar(path: str | Path, records: dict[str, tuple[list[str], list[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, (pos, ner) in records.items():
            fh.write(f"{key}\t{' '.join(pos)}\t{' '.join(ner)}\n")


@dataclass
class TagEmbeddings:
    pos: Tensor
    ner: Tensor

    def __post_init__(self):
        if self.pos.shape[1] != POS_DIM or self.ner.shape[1] != NER_DIM:
            raise ValueError(f"tag embeddings must be {POS_DIM}- and {NER_DIM}-wide")

    @classmethod
    def init(cls, tags: TagVocab, rng: np.random.Generator) -> "TagEmbeddings":
        return cls(
            tn.parameter(rng.normal(0.0, 0.1, size=(len(tags.pos), POS_DIM))),
            tn.parameter(rng.normal(0.0, 0.1, size=(len(tags.ner), NER_DIM))),
        )

    def named(self) -> dict[str, Tensor]:
        return {"pos": self.pos, "ner": self.ner}


# ---------------------------------------------------------------- featurisation


@dataclass
class TokenFeatures:
    context: str
    context_tokens: list[Token]
    question_tokens: list[Token]
    c_ids: np.ndarray
    q_ids: np.ndarray
    tf: np.ndarray
    pos_ids: np.ndarray
    ner_ids: np.ndarray
    hard: np.ndarray

    @property
    def n(self) -> int:
        return len(self.context_tokens)

    @property
    def m(self) -> int:
        return len(self.question_tokens)


def featurize(
    context: str,
    question: str,
    vocab: Vocabulary,
    tags: TagVocab | None = None,
    context_tags: tuple[Sequence[str], Sequence[str]] | None = None,
) -> TokenFeatures:
    """Static (parameter-free) per-token features for one pair."""
    c_tok = tokenize(context)
    q_tok = tokenize(question)
    if not c_tok:
        raise IngestionError("context has no tokens")
    if not q_tok:
        raise IngestionError("question has no tokens")
    tags = tags or TagVocab()
    pos, ner = context_tags if context_tags is not None else (None, None)
    return TokenFeatures(
        context=context,
        context_tokens=c_tok,
        question_tokens=q_tok,
        c_ids=vocab.ids(_words(c_tok)),
        q_ids=vocab.ids(_words(q_tok)),
        tf=term_frequency(c_tok).data,
        pos_ids=tags.pos_ids(pos, len(c_tok)),
        ner_ids=tags.ner_ids(ner, len(c_tok)),
        hard=hard_match(c_tok, q_tok).data,
    )


@dataclass
class EncodedBatch:
    """Right-padded feature arrays for B pairs."""

    c_ids: np.ndarray
    q_ids: np.ndarray
    c_mask: np.ndarray
    q_mask: np.ndarray
    tf: np.ndarray
    pos_ids: np.ndarray
    ner_ids: np.ndarray
    hard: np.ndarray

    @property
    def size(self) -> int:
        return self.c_ids.shape[0]

    @classmethod
    def collate(cls, items: Sequence[TokenFeatures]) -> "EncodedBatch":
        B = len(items)
        n = max(f.n for f in items)
        m = max(f.m for f in items)
        c_ids = np.full((B, n), PAD, dtype=np.int64)
        q_ids = np.full((B, m), PAD, dtype=np.int64)
        c_mask = np.zeros((B, n), dtype=bool)
        q_mask = np.zeros((B, m), dtype=bool)
        tf = np.zeros((B, n, TF_DIM))
        pos = np.zeros((B, n), dtype=np.int64)
        ner = np.zeros((B, n), dtype=np.int64)
        hard = np.zeros((B, n, MATCH_DIM))
        for b, f in enumerate(items):
            c_ids[b, : f.n] = f.c_ids
            q_ids[b, : f.m] = f.q_ids
            c_mask[b, : f.n] = True
            q_mask[b, : f.m] = True
            tf[b, : f.n] = f.tf
            pos[b, : f.n] = f.pos_ids
            ner[b, : f.n] = f.ner_ids
            hard[b, : f.n] = f.hard
        return cls(c_ids, q_ids, c_mask, q_mask, tf, pos, ner, hard)


CONTEXT_WIDTHS = {
    "glove": EMB_DIM,
    "tf": TF_DIM,
    "pos": POS_DIM,
    "ner": NER_DIM,
    "soft_match": EMB_DIM,
    "hard_match": MATCH_DIM,
}


def context_width(emb_dim: int = EMB_DIM) -> int:
    return 2 * emb_dim + TF_DIM + POS_DIM + NER_DIM + MATCH_DIM


assert sum(CONTEXT_WIDTHS.values()) == context_width() == 624


@dataclass
class Inputs:
    C_in: Tensor
    Q_in: Tensor
    C_glove: Tensor
    c_mask: np.ndarray
    q_mask: np.ndarray


def build_inputs(
    batch: EncodedBatch,
    embeddings: Tensor,
    tag_emb: TagEmbeddings,
    attn_params: AttnParams,
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Inputs:
    """Context rows ``[glove; tf; pos; ner; soft_match; hard_match]`` and
    question rows ``glove``, both with a leading batch axis."""
    C_glove = tn.embedding(embeddings, batch.c_ids)
    Q_glove = tn.embedding(embeddings, batch.q_ids)
    C_glove = variational_dropout(C_glove, dropout, rng, training)
    Q_glove = variational_dropout(Q_glove, dropout, rng, training)
    soft = word_level_soft_match(attn_params, C_glove, Q_glove, batch.q_mask)
    C_in = tn.concat_features(
        [
            C_glove,
            Tensor(batch.tf),
            tn.embedding(tag_emb.pos, batch.pos_ids),
            tn.embedding(tag_emb.ner, batch.ner_ids),
            soft,
            Tensor(batch.hard),
        ]
    )
    expected = context_width(embeddings.shape[1])
    if C_in.shape[-1] != expected:
        raise ValueError(f"context features are {C_in.shape[-1]}-wide, expected {expected}")
    return Inputs(C_in, Q_glove, C_glove, batch.c_mask, batch.q_mask)
