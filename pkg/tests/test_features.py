from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastfusion import tensor as tn
from fastfusion.attention import AttnParams
from fastfusion.features import (
    CONTEXT_WIDTHS,
    UNK,
    EncodedBatch,
    IngestionError,
    TagEmbeddings,
    TagVocab,
    Vocabulary,
    build_inputs,
    featurize,
    hard_match,
    lemmatize,
    load_embedding_file,
    read_tag_sidecar,
    term_frequency,
    tokenize,
    write_tag_sidecar,
)


def test_tokenize_examples():
    toks = tokenize("Hello, world!")
    assert [t.text for t in toks] == ["Hello", ",", "world", "!"]
    assert [(t.start, t.end) for t in toks] == [(0, 5), (5, 6), (7, 12), (12, 13)]
    assert tokenize("") == []
    assert [(t.text, t.start, t.end) for t in tokenize("a b")] == [("a", 0, 1), ("b", 2, 3)]


@given(st.text(alphabet=st.sampled_from(list("abc XY,.!'\"()\n-")), max_size=60))
def test_tokens_are_verbatim_slices(text):
    toks = tokenize(text)
    for t in toks:
        assert text[t.start : t.end] == t.text and t.text.strip() == t.text and t.text
    assert all(a.end <= b.start for a, b in zip(toks, toks[1:]))
    assert "".join(t.text for t in toks) == "".join(text.split())


def test_hard_match_examples():
    out = hard_match(tokenize("The cat"), tokenize("the mat")).data
    assert out.tolist() == [[0, 1, 1], [0, 0, 0]]
    assert not hard_match(tokenize("a b c"), []).data.any()
    assert hard_match(tokenize("x Paris y"), tokenize("is Paris"))[1].data.tolist() == [1, 1, 1]


def test_lemma_rules():
    assert lemmatize("cities") == "city"
    assert lemmatize("boxes") == "box"
    assert lemmatize("Cats") == "cat"
    assert lemmatize("walked") == "walk"
    assert lemmatize("glass") == "glass"


@given(st.lists(st.sampled_from(["a", "b", "c", "D", "d"]), min_size=1, max_size=12))
def test_hard_match_flags_nest(words):
    q = words[: len(words) // 2]
    out = hard_match(words, q).data
    assert (out[:, 0] <= out[:, 1]).all() and (out[:, 1] <= out[:, 2]).all()


def test_term_frequency():
    assert np.allclose(term_frequency(["a", "b", "c", "d"]).data, 0.25)
    assert term_frequency(["a", "b", "a", "c"]).data[0, 0] == 0.5
    assert term_frequency(["x"]).data.tolist() == [[1.0]]


def test_embedding_file_and_vocab(tmp_path):
    f = tmp_path / "vec.txt"
    f.write_text("cat 1 2 3\ndog 4 5 6\nbad row\n", encoding="utf-8")
    vecs = load_embedding_file(f, dim=3)
    assert vecs["dog"].tolist() == [4, 5, 6] and "bad" not in vecs
    v = Vocabulary.build(Counter({"cat": 3, "dog": 1, "emu": 2}), f, dim=3, n_tune=2)
    assert v.embeddings[v.lookup("cat")].tolist() == [1, 2, 3]
    assert v.lookup("zebra") == UNK
    assert not v.embeddings[0].any()
    assert set(v.tune_ids.tolist()) == {0, 1, v.lookup("cat"), v.lookup("emu")}


def test_sidecar_round_trip(tmp_path):
    recs = {"q1": (["DT", "NN"], ["O", "O"]), "q2": (["NNP"], ["GPE"])}
    write_tag_sidecar(tmp_path / "t.tsv", recs)
    assert read_tag_sidecar(tmp_path / "t.tsv") == recs
    tv = TagVocab.from_sidecar(recs)
    assert tv.pos[0] == "<none>" and tv.pos_ids(["NN", "??"], 2).tolist() == [tv.pos.index("NN"), 0]
    (tmp_path / "bad.tsv").write_text("q1\tDT NN\tO\n", encoding="utf-8")
    with pytest.raises(IngestionError):
        read_tag_sidecar(tmp_path / "bad.tsv")


def _setup(rng, dim=20):
    vocab = Vocabulary.build(Counter({"the": 5, "cat": 2, "sat": 1, "mat": 1}), dim=dim)
    tags = TagVocab()
    return vocab, tags, TagEmbeddings.init(tags, rng), AttnParams.init(dim, 8, rng)


def test_featurize_rejects_empty(rng):
    vocab, tags, _, _ = _setup(rng)
    with pytest.raises(IngestionError):
        featurize("   ", "q", vocab, tags)
    with pytest.raises(IngestionError):
        featurize("ctx", "", vocab, tags)


def test_build_inputs_widths_and_slices(rng):
    vocab, tags, temb, ap = _setup(rng, dim=300)
    feats = [featurize("the cat sat on the mat .", "where did the cat sit ?", vocab, tags),
             featurize("zorblax qux", "what ?", vocab, tags)]
    batch = EncodedBatch.collate(feats)
    emb = tn.parameter(vocab.embeddings)
    inp = build_inputs(batch, emb, temb, ap)
    assert inp.C_in.shape == (2, 7, 624) and inp.Q_in.shape == (2, 6, 300)
    assert sum(CONTEXT_WIDTHS.values()) == 624
    # unknown words use the unk row
    assert np.array_equal(inp.C_in.data[1, 0, :300], vocab.embeddings[UNK])
    lo = 0
    pieces = {}
    for name, w in CONTEXT_WIDTHS.items():
        pieces[name] = inp.C_in.data[:, :, lo : lo + w]
        lo += w
    assert np.array_equal(pieces["glove"], inp.C_glove.data)
    assert np.array_equal(pieces["tf"], batch.tf)
    assert np.array_equal(pieces["hard_match"], batch.hard)
    assert np.array_equal(pieces["pos"], temb.pos.data[batch.pos_ids])
    assert np.array_equal(pieces["ner"], temb.ner.data[batch.ner_ids])


def test_collate_pads_and_masks(rng):
    vocab, tags, _, _ = _setup(rng)
    b = EncodedBatch.collate([featurize("a b c", "q", vocab, tags), featurize("a", "q r", vocab, tags)])
    assert b.c_mask.tolist() == [[1, 1, 1], [1, 0, 0]]
    assert b.q_mask.tolist() == [[1, 0], [1, 1]]
    assert b.c_ids[1, 1:].tolist() == [0, 0]
