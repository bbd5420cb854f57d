from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urlbert_lab import corpus as cp
from urlbert_lab import tokenizer as tk


@pytest.fixture(scope="module")
def small_vocab():
    recs = cp.synth_corpus(800, seed=21)
    return tk.train_vocab(recs, target_size=512, seed=0), recs


# ---------------------------------------------------------------- training


def test_case_insensitive_training_identical_vocab():
    v1 = tk.train_vocab(["http://a.com"], target_size=64)
    v2 = tk.train_vocab(["HTTP://A.COM"], target_size=64)
    assert v1.tokens == v2.tokens


def test_zero_merge_vocab_is_specials_plus_alphabet():
    corpus = ["ab:c"]
    chars = sorted(set("ab:c"))
    min_size = 6 + 2 * len(chars)
    v = tk.train_vocab(corpus, target_size=min_size)
    assert v.size == min_size
    learned = set(v.tokens[6:])
    assert learned == set(chars) | {"##" + c for c in chars}


def test_target_below_alphabet_rejected():
    with pytest.raises(ValueError, match="below minimum"):
        tk.train_vocab(["abcdef"], target_size=7)


def test_training_deterministic():
    recs = cp.synth_corpus(100, seed=3)
    a = tk.train_vocab(recs, target_size=200, seed=0)
    b = tk.train_vocab(recs, target_size=200, seed=99)  # seed is inert by design
    assert a.tokens == b.tokens


def test_frequent_words_become_whole_pieces(small_vocab):
    # independent oracle: count words in the corpus directly; the most frequent
    # multi-char words must exist as single (possibly ##-prefixed) pieces
    vocab, recs = small_vocab
    counts = Counter()
    for r in recs:
        counts.update(tk._pretokenize(r.url.lower()))
    frequent = [w for w, _ in counts.most_common(8) if len(w) > 1]
    assert frequent, "corpus should contain frequent multi-char words"
    for w in frequent:
        assert w in vocab.tokens or ("##" + w) in vocab.tokens, f"{w} not merged"
    assert "http" in vocab.tokens
    assert "com" in vocab.tokens


def test_no_uppercase_and_no_duplicates(small_vocab):
    vocab, _ = small_vocab
    learned = vocab.tokens[6:]
    assert all(t == t.lower() for t in learned)
    assert len(set(vocab.tokens)) == vocab.size


# ---------------------------------------------------------------- encoding


def test_encode_empty_string(small_vocab):
    vocab, _ = small_vocab
    seq = tk.encode(vocab, "", max_len=8)
    assert seq.true_len == 1
    assert seq.ids[0] == tk.CLS_ID
    assert (seq.ids[1:] == tk.PAD_ID).all()
    assert seq.attention_mask.tolist() == [1, 0, 0, 0, 0, 0, 0, 0]


def test_encode_case_normalization(small_vocab):
    vocab, _ = small_vocab
    a = tk.encode(vocab, "HTTP://A.COM", max_len=32)
    b = tk.encode(vocab, "http://a.com", max_len=32)
    np.testing.assert_array_equal(a.ids, b.ids)


def test_encode_long_url_truncates(small_vocab):
    vocab, _ = small_vocab
    url = "http://" + "a" * 600 + ".com"
    seq = tk.encode(vocab, url, max_len=64)
    assert seq.true_len == 64
    assert seq.ids[0] == tk.CLS_ID


def test_encode_never_emits_rep_shu_or_mask(small_vocab):
    vocab, recs = small_vocab
    for r in recs[:200]:
        seq = tk.encode(vocab, r.url, max_len=64)
        used = set(seq.ids.tolist())
        assert tk.REP_ID not in used
        assert tk.SHU_ID not in used
        assert tk.MASK_ID not in used


def test_encode_batch_matches_single(small_vocab):
    vocab, recs = small_vocab
    batch = tk.encode_batch(vocab, recs[:10], max_len=48)
    for i, r in enumerate(recs[:10]):
        seq = tk.encode(vocab, r.url, max_len=48)
        np.testing.assert_array_equal(batch.ids[i], seq.ids)
        assert batch.true_lens[i] == seq.true_len


def test_encode_max_len_too_small(small_vocab):
    vocab, _ = small_vocab
    with pytest.raises(ValueError):
        tk.encode(vocab, "http://a.com", max_len=1)


# ---------------------------------------------------------------- decoding


def test_decode_roundtrip(small_vocab):
    vocab, recs = small_vocab
    for r in recs[:100]:
        seq = tk.encode(vocab, r.url, max_len=128)
        assert tk.decode(vocab, seq) == r.url.lower()


def test_decode_cls_pad_only_is_empty(small_vocab):
    vocab, _ = small_vocab
    seq = tk.encode(vocab, "", max_len=8)
    assert tk.decode(vocab, seq) == ""


def test_unknown_character_becomes_unk_span(small_vocab):
    vocab, _ = small_vocab
    # CJK characters never occur in the synthetic corpus
    seq = tk.encode(vocab, "http://a.com/世界", max_len=32)
    assert tk.UNK_ID in seq.ids
    decoded = tk.decode(vocab, seq)
    assert "[UNK]" in decoded
    assert decoded.startswith("http://a.com/")


def test_consecutive_unknown_chars_collapse_to_one_unk(small_vocab):
    vocab, _ = small_vocab
    seq = tk.encode(vocab, "ab世界cd", max_len=32)
    assert (seq.ids == tk.UNK_ID).sum() == 1


def test_decode_out_of_range_id(small_vocab):
    vocab, _ = small_vocab
    with pytest.raises(ValueError, match="out of range"):
        tk.decode(vocab, np.array([vocab.size]))


# ---------------------------------------------------------------- vocab file


def test_vocab_save_load_roundtrip(tmp_path, small_vocab):
    vocab, _ = small_vocab
    p = tmp_path / "vocab.json"
    vocab.save(p)
    again = tk.Vocab.load(p)
    assert again.tokens == vocab.tokens


def test_vocab_file_schema(tmp_path, small_vocab):
    import json
    vocab, _ = small_vocab
    p = tmp_path / "vocab.json"
    vocab.save(p)
    payload = json.loads(p.read_text("utf-8"))
    assert payload["version"] == 1
    assert payload["specials"] == ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "[REP]", "[SHU]"]
    assert payload["continuation_prefix"] == "##"
    assert isinstance(payload["tokens"], list)


def test_special_ids_pinned():
    assert (tk.PAD_ID, tk.UNK_ID, tk.CLS_ID, tk.MASK_ID, tk.REP_ID, tk.SHU_ID) == (0, 1, 2, 3, 4, 5)


# ---------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="abchtp019.:/-?=&", min_size=0, max_size=40))
def test_roundtrip_property_over_training_alphabet(text):
    # vocab trained on a corpus covering the whole strategy alphabet
    vocab = test_roundtrip_property_over_training_alphabet.vocab
    seq = tk.encode(vocab, text, max_len=128)
    assert tk.decode(vocab, seq) == text.lower()


test_roundtrip_property_over_training_alphabet.vocab = tk.train_vocab(
    ["http://abc019.com/a-b?c=1&t=p:0"], target_size=80)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=700))
def test_encode_deterministic_property(i):
    vocab = test_roundtrip_property_over_training_alphabet.vocab
    url = f"http://a{i}.com/p?q={i}"
    a = tk.encode(vocab, url, max_len=64)
    b = tk.encode(vocab, url, max_len=64)
    np.testing.assert_array_equal(a.ids, b.ids)
