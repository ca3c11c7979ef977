import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import cases
from fastfusion import tensor as tn
from fastfusion.features import EncodedBatch
from fastfusion.gradcheck import finite_diff_check
from fastfusion.model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    ModelParams,
    answer_scores,
    encode,
    load_checkpoint,
    predict,
    save_checkpoint,
    span_search,
)
from fastfusion.tensor import DegenerateError, Tensor


def test_default_config_widths():
    cfg = ModelConfig()
    w = cfg.widths()
    assert (w["C_in"], w["Q_in"], w["bisru_out"], w["C_His"], w["C_His2"]) == (624, 300, 250, 800, 1800)


def test_audit_at_hidden_125():
    reader = cases.small_reader(hidden=125, emb_dim=300)
    w = reader.params.audit(reader.config)
    assert w["C_His"] == 800 and w["C_His2"] == 1800
    for layers in reader.params.blocks.values():
        assert layers[-1].d_out == 250


def test_audit_catches_broken_width(rng):
    reader = cases.small_reader()
    reader.params.blocks["fuse_c"] = reader.params.blocks["high_c"]
    with pytest.raises(ConfigError):
        reader.params.audit(reader.config)
    with pytest.raises(ConfigError):
        ModelConfig(cell="gru")


def test_encode_widths_and_single_token():
    reader = cases.small_reader()
    cfg = reader.config
    for n, m in ((1, 1), (5, 3)):
        C = Tensor(np.random.default_rng(n).normal(size=(n, cfg.widths()["C_in"])))
        Q = Tensor(np.random.default_rng(m).normal(size=(m, cfg.emb_dim)))
        enc = encode(cfg, reader.params, C, Q, None, None)
        assert enc.C_u.shape == (1, n, 16) and enc.Q_u.shape == (1, m, 16) and enc.q.shape == (1, 16)
        s, e = answer_scores(reader.params, enc.C_u[0], enc.Q_u[0], enc.q[0])
        assert s.is_finite() and e.is_finite()
        assert abs(s.data.sum() - 1) < 1e-9 and abs(e.data.sum() - 1) < 1e-9
        if n == 1:
            assert s.data.tolist() == [1.0] and e.data.tolist() == [1.0]


def test_zero_start_weights_give_uniform_start(rng):
    reader = cases.small_reader()
    p = reader.params
    p.W_start.data[:] = 0
    C_u = Tensor(rng.normal(size=(2, 5, 16)))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], bool)
    s, e = answer_scores(p, C_u, Tensor(rng.normal(size=(2, 3, 16))), Tensor(rng.normal(size=(2, 16))), mask)
    assert np.allclose(s.data[0], 0.2) and np.allclose(s.data[1], [1 / 3] * 3 + [0, 0])
    assert np.allclose(e.data.sum(axis=1), 1.0)


def test_answer_head_gradcheck(rng):
    reader = cases.small_reader(hidden=3)
    p = reader.params
    C_u = tn.parameter(rng.normal(size=(2, 4, 6)))
    q = tn.parameter(rng.normal(size=(2, 6)))
    w = Tensor(rng.normal(size=(2, 4)))

    def f():
        s, e = answer_scores(p, C_u, None, q)
        return tn.add(tn.sum_all(tn.mul(s, w)), tn.sum_all(tn.mul(e, tn.mul(w, w))))

    assert finite_diff_check(f, [C_u, q, p.W_start, p.W_end, *p.gru.named().values()]) < 1e-4


def test_span_search_examples():
    assert span_search([1.0], [1.0])[:3] == (0, 0, 1.0)
    n = 40
    s = np.full(n, 0.01)
    e = np.full(n, 0.01)
    s[2], e[30] = 0.6, 0.6
    s, e = s / s.sum(), e / e.sum()
    got = span_search(s, e, max_len=15)
    assert (got.start, got.end) != (2, 30)
    ref, best = cases.naive_span(s, e, 15)
    assert (got.start, got.end) == ref and got.score == best
    with pytest.raises(DegenerateError):
        span_search([], [])


@given(st.integers(0, 2**31))
def test_span_search_brute_force(seed):
    r = np.random.default_rng(seed)
    s, e = cases.span_instance(r)
    got = span_search(s, e, 15)
    ref, best = cases.naive_span(s, e, 15)
    assert (got.start, got.end) == ref and got.score == best
    assert got.start <= got.end < got.start + 15


def test_predict_is_substring_and_deterministic(tiny_reader):
    ctx = "bakoda fikepa some words that may not be known ."
    p1 = predict(tiny_reader, ctx, "where is fikepa ?")
    p2 = tiny_reader.predict(ctx, "where is fikepa ?")
    assert p1 == p2
    a, b = p1.span.char_span
    assert ctx[a:b] == p1.text and p1.text in ctx


def test_batched_forward_matches_single(tiny_reader):
    f1 = tiny_reader.featurize("a b c d e f", "where is c")
    f2 = tiny_reader.featurize("x y", "where is x y")
    with tn.no_grad():
        s, e = tiny_reader.forward(EncodedBatch.collate([f1, f2]))
        s2, e2 = tiny_reader.forward(EncodedBatch.collate([f2]))
    np.testing.assert_allclose(s.data[1, :2], s2.data[0], atol=1e-12)
    np.testing.assert_allclose(e.data[1, :2], e2.data[0], atol=1e-12)
    assert not s.data[1, 2:].any()


def test_checkpoint_round_trip(tiny_reader, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_reader)
    back = load_checkpoint(path)
    assert back.config == tiny_reader.config and back.vocab.tokens == tiny_reader.vocab.tokens
    for k, t in tiny_reader.parameters().items():
        assert np.array_equal(back.parameters()[k].data, t.data)
    ctx, q = "bakoda fikepa lotu", "where is lotu"
    assert back.predict(ctx, q) == tiny_reader.predict(ctx, q)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_lstm_config_builds():
    reader = cases.small_reader()
    cfg = ModelConfig(sru_hidden=8, emb_dim=12, cell="lstm", layers_per_block=1)
    params = ModelParams.init(cfg, reader.vocab, reader.tags)
    assert len(params.blocks["low_c"]) == 1
