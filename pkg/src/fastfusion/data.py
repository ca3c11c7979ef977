"""SQuAD v1.1 ingestion, answer alignment and the EM/F1 metric."""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)


class SquadFormatError(ValueError):
    """The file is not valid SQuAD v1.1 JSON."""


@dataclass
class QaExample:
    id: str
    context: str
    question: str
    answers: list[tuple[str, int]] = field(default_factory=list)
    title: str = ""

    def misaligned(self) -> list[int]:
        """Indices of answers whose text is not found at its char offset."""
        return [
            k
            for k, (text, start) in enumerate(self.answers)
            if self.context[start : start + len(text)] != text
        ]


@dataclass
class EvalResult:
    f1: float
    em: float
    n: int


def load_squad_json(path: str | Path, alignment_warnings: list[str] | None = None) -> list[QaExample]:
    """Flatten data -> paragraphs -> qas into one example per question.

    Answers whose text does not match the context at ``answer_start`` are kept
    but reported (by id) into ``alignment_warnings`` and the log.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SquadFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("data"), list):
        raise SquadFormatError(f"{path}: top level must be an object with a 'data' list")
    out: list[QaExample] = []
    for a, article in enumerate(raw["data"]):
        title = article.get("title", "")
        for p, para in enumerate(article.get("paragraphs", [])):
            try:
                context = para["context"]
                qas = para["qas"]
            except (KeyError, TypeError) as exc:
                raise SquadFormatError(f"{path}: data[{a}].paragraphs[{p}] missing {exc}") from exc
            for qa in qas:
                try:
                    ex = QaExample(
                        id=str(qa["id"]),
                        context=context,
                        question=qa["question"],
                        answers=[(ans["text"], int(ans["answer_start"])) for ans in qa.get("answers", [])],
                        title=title,
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise SquadFormatError(f"{path}: data[{a}].paragraphs[{p}]: bad qa entry ({exc})") from exc
                bad = ex.misaligned()
                if bad:
                    msg = f"{ex.id}: answers {bad} do not match the context at answer_start"
                    logger.warning(msg)
                    if alignment_warnings is not None:
                        alignment_warnings.append(msg)
                out.append(ex)
    return out


def dump_squad_json(examples: Sequence[QaExample], path: str | Path | None = None) -> dict:
    """Inverse of :func:`load_squad_json` (one paragraph per distinct context)."""
    articles: dict[str, dict] = {}
    paragraphs: dict[tuple[str, str], dict] = {}
    for ex in examples:
        art = articles.setdefault(ex.title, {"title": ex.title, "paragraphs": []})
        key = (ex.title, ex.context)
        if key not in paragraphs:
            paragraphs[key] = {"context": ex.context, "qas": []}
            art["paragraphs"].append(paragraphs[key])
        paragraphs[key]["qas"].append(
            {
                "id": ex.id,
                "question": ex.question,
                "answers": [{"text": t, "answer_start": s} for t, s in ex.answers],
            }
        )
    doc = {"version": "1.1", "data": list(articles.values())}
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, ensure_ascii=False)
    return doc


def align_answer_span(answer: tuple[str, int], tokens: Sequence) -> tuple[int, int]:
    """Smallest token span covering the answer's character range.

    ``tokens`` carry ``start``/``end`` character offsets. When the answer does
    not start and end on token boundaries the covering span is still returned
    and a warning is logged.
    """
    text, a = answer
    b = a + len(text)
    hits = [k for k, t in enumerate(tokens) if t.start < b and t.end > a]
    if not hits:
        raise ValueError(f"answer range [{a}, {b}) overlaps no token")
    first, last = hits[0], hits[-1]
    if tokens[first].start != a or tokens[last].end != b:
        logger.warning("answer %r at %d does not fall on token boundaries", text, a)
    return first, last


# ---------------------------------------------------------------- metric

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_em(prediction: str, golds: Iterable[str]) -> tuple[float, int]:
    golds = list(golds)
    if not golds:
        raise ValueError("f1_em needs at least one gold answer")
    pred = normalize_answer(prediction)
    pred_tokens = pred.split()
    f1 = max(_f1(pred_tokens, normalize_answer(g).split()) for g in golds)
    em = int(any(pred == normalize_answer(g) for g in golds))
    return f1, em


def evaluate_predictions(examples: Sequence[QaExample], predictions: Mapping[str, str]) -> EvalResult:
    """Mean F1/EM over ``examples``; a missing prediction scores zero."""
    if not examples:
        return EvalResult(0.0, 0.0, 0)
    f1_sum = em_sum = 0.0
    for ex in examples:
        pred = predictions.get(ex.id)
        if pred is None:
            continue
        f1, em = f1_em(pred, [t for t, _ in ex.answers])
        f1_sum += f1
        em_sum += em
    n = len(examples)
    return EvalResult(f1_sum / n, em_sum / n, n)


def write_predictions(path: str | Path, predictions: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(predictions), fh, ensure_ascii=False, indent=1)
