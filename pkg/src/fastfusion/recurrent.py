"""SRU layers (uni-, bi-directional, stacked) and LSTM/GRU baselines.

Sequences are (T, d) or batched (B, T, d). Batched padding is always at the
end of each sequence; ``mask`` marks the valid prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .tensor import ShapeError, Tensor


class MaskError(ValueError):
    """A sequence mask is not a contiguous valid prefix."""


def _uniform(rng: np.random.Generator, d_in: int, shape) -> Tensor:
    bound = np.sqrt(1.0 / d_in)
    return tn.parameter(rng.uniform(-bound, bound, size=shape))


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tn.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (T, d) or (B, T, d), got {x.shape}")
    return x, False


def mask_lengths(mask: np.ndarray | None, B: int, T: int) -> np.ndarray:
    """Valid lengths from a (T,) or (B, T) boolean prefix mask."""
    if mask is None:
        return np.full(B, T, dtype=np.int64)
    m = np.asarray(mask, dtype=bool).reshape(B, T)
    lengths = m.sum(axis=1)
    prefix = np.arange(T)[None, :] < lengths[:, None]
    if not np.array_equal(prefix, m):
        raise MaskError("mask must mark a contiguous prefix of valid steps")
    return lengths.astype(np.int64)


def variational_dropout(
    x: Tensor, rate: float, rng: np.random.Generator | None, training: bool
) -> Tensor:
    """Dropout with one mask per sequence, reused at every step.

    For a (B, T, d) input the mask has shape (B, 1, d); for (T, d) it is (1, d).
    Kept units are scaled by 1/(1 - rate).
    """
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout during training needs an rng")
    shape = (x.shape[0], 1, x.shape[2]) if x.ndim == 3 else (1, x.shape[-1])
    keep = rng.random(shape) >= rate
    return tn.mask_mul(x, keep / (1.0 - rate))


# ---------------------------------------------------------------- SRU


@dataclass
class SruLayerParams:
    W: Tensor
    W_f: Tensor
    b_f: Tensor
    W_r: Tensor
    b_r: Tensor
    W_res: Tensor | None = None

    def __post_init__(self):
        shapes = {self.W.shape, self.W_f.shape, self.W_r.shape}
        if len(shapes) != 1:
            raise ShapeError(f"SRU matrices disagree: {sorted(shapes)}")
        d_in, d_h = self.W.shape
        if self.b_f.shape != (d_h,) or self.b_r.shape != (d_h,):
            raise ShapeError("SRU bias width must equal hidden size")
        if (self.W_res is not None) != (d_in != d_h):
            raise ShapeError("W_res is required exactly when d_in != d_h")
        if self.W_res is not None and self.W_res.shape != (d_in, d_h):
            raise ShapeError(f"W_res shape {self.W_res.shape}, expected {(d_in, d_h)}")

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_h(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "SruLayerParams":
        return cls(
            W=_uniform(rng, d_in, (d_in, d_h)),
            W_f=_uniform(rng, d_in, (d_in, d_h)),
            b_f=tn.parameter(np.zeros(d_h)),
            W_r=_uniform(rng, d_in, (d_in, d_h)),
            b_r=tn.parameter(np.zeros(d_h)),
            W_res=_uniform(rng, d_in, (d_in, d_h)) if d_in != d_h else None,
        )

    def named(self) -> dict[str, Tensor]:
        out = {"W": self.W, "W_f": self.W_f, "b_f": self.b_f, "W_r": self.W_r, "b_r": self.b_r}
        if self.W_res is not None:
            out["W_res"] = self.W_res
        return out


@dataclass
class RecurrentState:
    c: np.ndarray
    h: np.ndarray


def _projections(p: SruLayerParams) -> list[Tensor]:
    ws = [p.W, p.W_f, p.W_r]
    if p.W_res is not None:
        ws.append(p.W_res)
    return ws


def _sru_core(p: SruLayerParams, U: Tensor, x_hw: Tensor | None, c0: Tensor, last: np.ndarray):
    """Gates, recurrence and highway output from the stacked projections U.

    U holds ``[x W, x W_f, x W_r(, x W_res)]`` along its last axis.
    """
    d = p.d_h
    if not _needs_tape(U, c0, p.b_f, p.b_r, *([] if x_hw is None else [x_hw])):
        h, c_last = _sru_core_numpy(p, U.data, None if x_hw is None else x_hw.data, c0.data, last)
        return Tensor(h), Tensor(c_last)
    x_tilde = tn.slice_axis(U, 0, d)
    f = tn.sigmoid(tn.add_bias(tn.slice_axis(U, d, 2 * d), p.b_f))
    r = tn.sigmoid(tn.add_bias(tn.slice_axis(U, 2 * d, 3 * d), p.b_r))
    c = tn.sru_scan(f, tn.mul(tn.one_minus(f), x_tilde), c0)
    highway = x_hw if p.W_res is None else tn.slice_axis(U, 3 * d, 4 * d)
    h = tn.add(tn.mul(r, tn.tanh(c)), tn.mul(tn.one_minus(r), highway))
    c_last = tn.index(c, (np.arange(U.shape[0]), last))
    return h, c_last


def _sru_core_numpy(p: SruLayerParams, U: np.ndarray, x_hw, c0: np.ndarray, last: np.ndarray):
    # Same arithmetic as the tape path, on raw arrays; results are bit-identical.
    d = p.d_h
    B, T, _ = U.shape
    f = expit(U[..., d : 2 * d] + p.b_f.data)
    r = expit(U[..., 2 * d : 3 * d] + p.b_r.data)
    ut = np.ascontiguousarray(((1.0 - f) * U[..., :d]).transpose(1, 0, 2))
    ft = np.ascontiguousarray(f.transpose(1, 0, 2))
    cs = np.empty((T, B, d))
    c = c0
    for t in range(T):
        c = ft[t] * c + ut[t]
        cs[t] = c
    c_all = cs.transpose(1, 0, 2)
    highway = x_hw if p.W_res is None else U[..., 3 * d : 4 * d]
    h = r * np.tanh(c_all) + (1.0 - r) * highway
    return h, c_all[np.arange(B), last]


def _zero_state(B: int, d: int) -> Tensor:
    return Tensor(np.zeros((B, d)))


def sru_forward(
    params: SruLayerParams,
    x: Tensor,
    c0: Tensor | np.ndarray | None = None,
    dropout_mask: np.ndarray | None = None,
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """One SRU layer over a whole sequence. Returns (h, c_T).

    The projections for every step are computed up front in a single gemm
    against the column-stacked weights; only ``c_t`` is computed step by step.
    """
    xb, squeeze = _as_batch(x)
    B, T, d_in = xb.shape
    if T < 1:
        raise ShapeError("sru_forward needs at least one step")
    if d_in != params.d_in:
        raise ShapeError(f"sru_forward: input width {d_in}, layer expects {params.d_in}")
    d_h = params.d_h
    if dropout_mask is not None:
        m = np.asarray(dropout_mask, dtype=np.float64)
        xb = tn.mask_mul(xb, m.reshape(-1, 1, d_in) if m.ndim <= 2 else m)
    if c0 is None:
        c0 = _zero_state(B, d_h)
    else:
        c0 = tn.as_tensor(c0)
        if c0.ndim == 1:
            c0 = tn.reshape(c0, (1, d_h))
        if c0.shape != (B, d_h):
            raise ShapeError(f"c0 shape {c0.shape}, expected {(B, d_h)}")
    U = tn.matmul(xb, tn.concat(_projections(params)))
    last = np.full(B, T - 1) if lengths is None else np.asarray(lengths, dtype=np.int64) - 1
    h, c_last = _sru_core(params, U, xb, c0, last)
    if squeeze:
        return tn.reshape(h, (T, d_h)), tn.reshape(c_last, (d_h,))
    return h, c_last


def sru_op_count(T: int, d_in: int, d_h: int) -> dict[str, int]:
    return {"matmuls": 3 + (d_in != d_h), "sequential_steps": T}


def bidirectional(run, p_fwd, p_bwd, x: Tensor, mask=None, dropout_mask=None) -> Tensor:
    """Run ``run(params, x)`` forwards and over the time-reversed valid prefix."""
    xb, squeeze = _as_batch(x)
    B, T, _ = xb.shape
    lengths = mask_lengths(mask, B, T)
    if dropout_mask is not None:
        m = np.asarray(dropout_mask, dtype=np.float64)
        xb = tn.mask_mul(xb, m.reshape(-1, 1, xb.shape[2]) if m.ndim <= 2 else m)
    h_f = run(p_fwd, xb, lengths)
    h_b = tn.reverse_padded(run(p_bwd, tn.reverse_padded(xb, lengths), lengths), lengths)
    out = tn.concat([h_f, h_b])
    if mask is not None and (lengths < T).any():
        valid = np.arange(T)[None, :] < lengths[:, None]
        out = tn.mask_mul(out, valid[:, :, None])
    if squeeze:
        return tn.reshape(out, out.shape[1:])
    return out


def bi_sru(p_fwd: SruLayerParams, p_bwd: SruLayerParams, x: Tensor, mask=None, dropout_mask=None) -> Tensor:
    """Bidirectional SRU; padded steps output zero.

    Both directions share one gemm: projecting rows commutes with reversing
    them, so the backward direction's projections are reversed afterwards.
    """
    if p_fwd.W.shape != p_bwd.W.shape:
        raise ShapeError("forward and backward SRU layers must have matching shapes")
    xb, squeeze = _as_batch(x)
    B, T, d_in = xb.shape
    if d_in != p_fwd.d_in:
        raise ShapeError(f"bi_sru: input width {d_in}, layer expects {p_fwd.d_in}")
    lengths = mask_lengths(mask, B, T)
    if dropout_mask is not None:
        m = np.asarray(dropout_mask, dtype=np.float64)
        xb = tn.mask_mul(xb, m.reshape(-1, 1, d_in) if m.ndim <= 2 else m)
    ws_f, ws_b = _projections(p_fwd), _projections(p_bwd)
    width = len(ws_f) * p_fwd.d_h
    U = tn.matmul(xb, tn.concat(ws_f + ws_b))
    last = lengths - 1
    d = p_fwd.d_h
    h_f, _ = _sru_core(p_fwd, tn.slice_axis(U, 0, width), xb, _zero_state(B, d), last)
    U_b = tn.reverse_padded(tn.slice_axis(U, width, 2 * width), lengths)
    x_b = tn.reverse_padded(xb, lengths) if p_bwd.W_res is None else None
    h_b, _ = _sru_core(p_bwd, U_b, x_b, _zero_state(B, d), last)
    out = tn.concat([h_f, tn.reverse_padded(h_b, lengths)])
    if (lengths < T).any():
        valid = np.arange(T)[None, :] < lengths[:, None]
        out = tn.mask_mul(out, valid[:, :, None])
    if squeeze:
        return tn.reshape(out, out.shape[1:])
    return out


@dataclass
class BiLayer:
    fwd: object
    bwd: object

    @property
    def d_in(self) -> int:
        return self.fwd.d_in

    @property
    def d_out(self) -> int:
        return 2 * self.fwd.d_h


def init_stack(d_in: int, d_h: int, n_layers: int, rng: np.random.Generator, cell: str = "sru"):
    cls = {"sru": SruLayerParams, "lstm": LstmParams}[cell]
    layers = []
    for i in range(n_layers):
        width = d_in if i == 0 else 2 * d_h
        layers.append(BiLayer(cls.init(width, d_h, rng), cls.init(width, d_h, rng)))
    return layers


def stacked_bi_sru(
    layers: Sequence[BiLayer],
    x: Tensor,
    mask=None,
    dropout: float = 0.2,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Stack of bidirectional recurrent layers with variational input dropout.

    Works for SRU and LSTM layer pairs alike.
    """
    width = x.shape[-1]
    for i, layer in enumerate(layers):
        if layer.d_in != width:
            raise ShapeError(f"layer {i} expects width {layer.d_in}, got {width}")
        width = layer.d_out
    h = x
    for layer in layers:
        h = variational_dropout(h, dropout, rng, training)
        if isinstance(layer.fwd, SruLayerParams):
            h = bi_sru(layer.fwd, layer.bwd, h, mask)
        else:
            h = bidirectional(_lstm_run, layer.fwd, layer.bwd, h, mask)
    return h


# ---------------------------------------------------------------- LSTM / GRU


@dataclass
class LstmParams:
    """Gate order along the 4*d_h axis: input, forget, cell, output."""

    W_ih: Tensor
    W_hh: Tensor
    b: Tensor

    def __post_init__(self):
        d_in, four_h = self.W_ih.shape
        if four_h % 4 or self.W_hh.shape != (four_h // 4, four_h) or self.b.shape != (four_h,):
            raise ShapeError("inconsistent LSTM parameter shapes")

    @property
    def d_in(self) -> int:
        return self.W_ih.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_hh.shape[0]

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "LstmParams":
        return cls(
            W_ih=_uniform(rng, d_in, (d_in, 4 * d_h)),
            W_hh=_uniform(rng, d_h, (d_h, 4 * d_h)),
            b=tn.parameter(np.zeros(4 * d_h)),
        )

    def named(self) -> dict[str, Tensor]:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b": self.b}


@dataclass
class GruParams:
    """Gate order along the 3*d_h axis: reset, update, candidate."""

    W_ih: Tensor
    W_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    def __post_init__(self):
        d_in, three_h = self.W_ih.shape
        ok = (
            three_h % 3 == 0
            and self.W_hh.shape == (three_h // 3, three_h)
            and self.b_ih.shape == (three_h,)
            and self.b_hh.shape == (three_h,)
        )
        if not ok:
            raise ShapeError("inconsistent GRU parameter shapes")

    @property
    def d_in(self) -> int:
        return self.W_ih.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_hh.shape[0]

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "GruParams":
        return cls(
            W_ih=_uniform(rng, d_in, (d_in, 3 * d_h)),
            W_hh=_uniform(rng, d_h, (d_h, 3 * d_h)),
            b_ih=tn.parameter(np.zeros(3 * d_h)),
            b_hh=tn.parameter(np.zeros(3 * d_h)),
        )

    def named(self) -> dict[str, Tensor]:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}


def _cols(x: Tensor, k: int, d: int) -> Tensor:
    return tn.slice_axis(x, k * d, (k + 1) * d)


def _needs_tape(*tensors) -> bool:
    return tn.grad_enabled() and any(t.requires_grad for t in tensors)


def lstm_forward(params: LstmParams, x: Tensor, lengths: np.ndarray | None = None) -> Tensor:
    """Standard LSTM over (T, d_in) or (B, T, d_in); zero initial state.

    The input projection is hoisted out of the loop, but every step still
    needs a (B, d_h) x (d_h, 4 d_h) matmul. Outside a gradient context the
    loop runs on raw arrays.
    """
    xb, squeeze = _as_batch(x)
    B, T, d_in = xb.shape
    if d_in != params.d_in:
        raise ShapeError(f"lstm_forward: input width {d_in}, layer expects {params.d_in}")
    d = params.d_h
    if not _needs_tape(xb, params.W_ih, params.W_hh, params.b):
        out = Tensor(_lstm_numpy(params, xb.data))
    else:
        xw = tn.add_bias(tn.matmul(xb, params.W_ih), params.b)
        h = Tensor(np.zeros((B, d)))
        c = Tensor(np.zeros((B, d)))
        steps = []
        for t in range(T):
            gates = tn.add(tn.index(xw, (slice(None), t)), tn.matmul(h, params.W_hh))
            i = tn.sigmoid(_cols(gates, 0, d))
            f = tn.sigmoid(_cols(gates, 1, d))
            g = tn.tanh(_cols(gates, 2, d))
            o = tn.sigmoid(_cols(gates, 3, d))
            c = tn.add(tn.mul(f, c), tn.mul(i, g))
            h = tn.mul(o, tn.tanh(c))
            steps.append(tn.reshape(h, (B, 1, d)))
        out = tn.concat(steps, axis=1)
    if squeeze:
        return tn.reshape(out, (T, d))
    return out


def _lstm_numpy(params: LstmParams, x: np.ndarray) -> np.ndarray:
    B, T, _ = x.shape
    d = params.d_h
    xw = np.ascontiguousarray((x @ params.W_ih.data + params.b.data).transpose(1, 0, 2))
    W_hh = params.W_hh.data
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    out = np.empty((T, B, d))
    for t in range(T):
        gates = xw[t] + h @ W_hh
        sig = expit(gates)
        c = sig[:, d : 2 * d] * c + sig[:, :d] * np.tanh(gates[:, 2 * d : 3 * d])
        h = sig[:, 3 * d :] * np.tanh(c)
        out[t] = h
    return out.transpose(1, 0, 2)


def _lstm_run(p, xb, lengths):
    return lstm_forward(p, xb, lengths)


def lstm_op_count(T: int, d_in: int, d_h: int) -> dict[str, int]:
    return {"matmuls": 1 + T, "sequential_steps": T}


def gru_cell(params: GruParams, inp: Tensor, hidden: Tensor) -> Tensor:
    """One GRU step on (d_in,) / (d_h,) vectors or (B, d_in) / (B, d_h) rows."""
    inp, hidden = tn.as_tensor(inp), tn.as_tensor(hidden)
    if inp.shape[-1] != params.d_in or hidden.shape[-1] != params.d_h:
        raise ShapeError(
            f"gru_cell: input {inp.shape}, hidden {hidden.shape} vs "
            f"params ({params.d_in}, {params.d_h})"
        )
    if inp.shape[:-1] != hidden.shape[:-1]:
        raise ShapeError(f"gru_cell: batch mismatch {inp.shape} vs {hidden.shape}")
    d = params.d_h
    squeeze = inp.ndim == 1
    if squeeze:
        inp = tn.reshape(inp, (1, params.d_in))
        hidden = tn.reshape(hidden, (1, d))
    gi = tn.add_bias(tn.matmul(inp, params.W_ih), params.b_ih)
    gh = tn.add_bias(tn.matmul(hidden, params.W_hh), params.b_hh)
    r = tn.sigmoid(tn.add(_cols(gi, 0, d), _cols(gh, 0, d)))
    z = tn.sigmoid(tn.add(_cols(gi, 1, d), _cols(gh, 1, d)))
    n = tn.tanh(tn.add(_cols(gi, 2, d), tn.mul(r, _cols(gh, 2, d))))
    out = tn.add(tn.mul(tn.one_minus(z), n), tn.mul(z, hidden))
    if squeeze:
        return tn.reshape(out, (d,))
    return out


def gru_forward(params: GruParams, x: Tensor) -> Tensor:
    """GRU over a sequence with zero initial state, for timing comparisons."""
    xb, squeeze = _as_batch(x)
    B, T, d_in = xb.shape
    if d_in != params.d_in:
        raise ShapeError(f"gru_forward: input width {d_in}, layer expects {params.d_in}")
    d = params.d_h
    if not _needs_tape(xb, *params.named().values()):
        out = Tensor(_gru_numpy(params, xb.data))
    else:
        h = Tensor(np.zeros((B, d)))
        steps = []
        for t in range(T):
            h = gru_cell(params, tn.index(xb, (slice(None), t)), h)
            steps.append(tn.reshape(h, (B, 1, d)))
        out = tn.concat(steps, axis=1)
    if squeeze:
        return tn.reshape(out, (T, d))
    return out


def _gru_numpy(params: GruParams, x: np.ndarray) -> np.ndarray:
    B, T, _ = x.shape
    d = params.d_h
    xw = np.ascontiguousarray((x @ params.W_ih.data + params.b_ih.data).transpose(1, 0, 2))
    W_hh, b_hh = params.W_hh.data, params.b_hh.data
    h = np.zeros((B, d))
    out = np.empty((T, B, d))
    for t in range(T):
        gh = h @ W_hh + b_hh
        rz = expit(xw[t, :, : 2 * d] + gh[:, : 2 * d])
        n = np.tanh(xw[t, :, 2 * d :] + rz[:, :d] * gh[:, 2 * d :])
        z = rz[:, d:]
        h = (1.0 - z) * n + z * h
        out[t] = h
    return out.transpose(1, 0, 2)


def gru_op_count(T: int, d_in: int, d_h: int) -> dict[str, int]:
    return {"matmuls": 1 + T, "sequential_steps": T}
