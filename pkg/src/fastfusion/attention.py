"""ReLU-projected dot-product attention and the question summary pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .recurrent import variational_dropout
from .tensor import ShapeError, Tensor


@dataclass
class AttnParams:
    """One projection ``W`` shared by queries and keys."""

    W: Tensor

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_attn(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, d_in: int, d_attn: int, rng: np.random.Generator) -> "AttnParams":
        if d_attn < 1:
            raise ValueError("attention width must be positive")
        bound = np.sqrt(1.0 / d_in)
        return cls(tn.parameter(rng.uniform(-bound, bound, size=(d_in, d_attn))))

    def named(self) -> dict[str, Tensor]:
        return {"W": self.W}


@dataclass
class SummaryParams:
    v: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "SummaryParams":
        bound = np.sqrt(1.0 / d)
        return cls(tn.parameter(rng.uniform(-bound, bound, size=d)))

    def named(self) -> dict[str, Tensor]:
        return {"v": self.v}


def _key_mask(mask, batched: bool, n: int, m: int):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if batched:
        return mask.reshape(mask.shape[0], 1, m)
    return mask.reshape(1, m)


def attn(
    params: AttnParams,
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    key_mask: np.ndarray | None = None,
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    return_weights: bool = False,
):
    """``O_i = sum_j softmax_j(relu(Q_i W) . relu(K_j W)) V_j``.

    Shapes are (n, d)/(m, d)/(m, d_v) or the same with a leading batch axis.
    ``key_mask`` (m,) or (B, m) marks valid keys. No temperature is applied.
    """
    batched = Q.ndim == 3
    if K.ndim != Q.ndim or V.ndim != Q.ndim or Q.ndim not in (2, 3):
        raise ShapeError(f"attn: rank mismatch {Q.shape}, {K.shape}, {V.shape}")
    if K.shape[:-1] != V.shape[:-1]:
        raise ShapeError(f"attn: keys {K.shape} and values {V.shape} differ in length")
    if Q.shape[-1] != params.d_in or K.shape[-1] != params.d_in:
        raise ShapeError(f"attn: query/key widths {Q.shape[-1]}/{K.shape[-1]}, W expects {params.d_in}")
    if batched and Q.shape[0] != K.shape[0]:
        raise ShapeError(f"attn: batch mismatch {Q.shape} vs {K.shape}")
    n, m = Q.shape[-2], K.shape[-2]
    Q = variational_dropout(Q, dropout, rng, training)
    K = variational_dropout(K, dropout, rng, training)
    q = tn.relu(tn.matmul(Q, params.W))
    k = tn.relu(tn.matmul(K, params.W))
    scores = tn.matmul(q, tn.transpose(k))
    weights = tn.softmax_rows(scores, _key_mask(key_mask, batched, n, m))
    out = tn.matmul(weights, V)
    if return_weights:
        return out, weights
    return out


def word_level_soft_match(
    params: AttnParams, C_glove: Tensor, Q_glove: Tensor, q_mask=None, **kw
) -> Tensor:
    """Each context word as a mixture of question word embeddings."""
    return attn(params, C_glove, Q_glove, Q_glove, q_mask, **kw)


def question_summary(params: SummaryParams, Q_u: Tensor, mask=None) -> Tensor:
    """Softmax(v . Q_j)-weighted sum of question rows: (m, d) -> (d,), (B, m, d) -> (B, d)."""
    d = params.v.shape[0]
    if Q_u.shape[-1] != d:
        raise ShapeError(f"question_summary: rows of width {Q_u.shape[-1]}, v has {d}")
    v_col = tn.reshape(params.v, (d, 1))
    if Q_u.ndim == 2:
        m = Q_u.shape[0]
        scores = tn.reshape(tn.matmul(Q_u, v_col), (1, m))
        w = tn.softmax_rows(scores, None if mask is None else np.asarray(mask, bool).reshape(1, m))
        return tn.reshape(tn.matmul(w, Q_u), (d,))
    B, m, _ = Q_u.shape
    scores = tn.reshape(tn.matmul(Q_u, v_col), (B, 1, m))
    w = tn.softmax_rows(scores, None if mask is None else np.asarray(mask, bool).reshape(B, 1, m))
    return tn.reshape(tn.matmul(w, Q_u), (B, d))
