"""Tokenizer, serialization conventions, augmentations and dataset IO."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvgen.documents import (DatasetError, Document, Fragment, KVPair, encode_source,
                             inject_ocr_noise, load_dataset, parse_generated,
                             save_dataset, serialize_target, shuffle_fragments)
from kvgen.synth import gen_synthetic_corpus
from kvgen.vocab import RESERVED_TOKENS, Vocab, build_vocab


def doc_of(texts, page=(600, 1000), pairs=()):
    frags = [Fragment(text=t, box=(10, 10 + 40 * i, 10 + 11 * len(t), 36 + 40 * i))
             for i, t in enumerate(texts)]
    return Document(id="t0", page_width=page[0], page_height=page[1],
                    fragments=frags, gold_pairs=list(pairs))


@pytest.fixture(scope="module")
def vocab():
    docs = gen_synthetic_corpus(seed=5, n_docs=12, template="receipt")
    return build_vocab(docs, max_size=800)


class TestVocab:
    def test_reserved_prefix_and_distinct_ids(self, vocab):
        assert tuple(vocab.tokens[:6]) == RESERVED_TOKENS
        assert len({vocab.pad_id, vocab.beg_id, vocab.sep_id,
                    vocab.mask_id, vocab.dsep_id, vocab.colon_id}) == 6

    def test_single_word_corpus_roundtrips(self):
        doc = doc_of(["total"])
        v = build_vocab([doc], max_size=100)
        ids = v.encode("total")
        assert v.decode(ids) == "total"

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_vocab([doc_of([])], max_size=100)

    def test_max_size_floor(self, vocab):
        with pytest.raises(ValueError, match="max_size"):
            build_vocab(gen_synthetic_corpus(seed=5, n_docs=2), max_size=10)

    def test_alphabet_strings_never_fail(self, vocab):
        alphabet = [t for t in vocab.tokens if len(t) == 1]
        text = "".join(alphabet) * 2
        assert vocab.decode(vocab.encode(text)) == text

    def test_save_load_identical_ids(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        loaded = Vocab.load(path)
        assert loaded.tokens == vocab.tokens
        assert loaded.encode("total : 15.80") == vocab.encode("total : 15.80")

    def test_specials_map_to_reserved_ids(self, vocab):
        ids = vocab.encode("a : d [DSEP] c [SEP]")
        assert vocab.dsep_id in ids and vocab.sep_id in ids and vocab.colon_id in ids

    @settings(deadline=None, max_examples=50)
    @given(st.text(alphabet="acdt 018/.", max_size=40))
    def test_roundtrip_property(self, vocab, text):
        assert vocab.decode(vocab.encode(text)) == text


class TestEncodeSource:
    def test_empty_document(self, vocab):
        enc = encode_source(doc_of([]), vocab, max_len=5)
        assert enc.ids == [vocab.beg_id, vocab.sep_id] + [vocab.pad_id] * 3

    def test_two_fragments_char_layout(self):
        doc = doc_of(["AB", "C"])
        v = build_vocab([doc], max_size=100)
        enc = encode_source(doc, v, max_len=8, order="given")
        a, b, c = (v.index[ch] for ch in "ABC")
        assert enc.ids == [v.beg_id, a, b, v.dsep_id, c, v.sep_id, v.pad_id, v.pad_id]
        assert enc.fragment_index == [None, 0, 0, None, 1, None, None, None]

    def test_output_length_equals_max_len(self, vocab):
        doc = gen_synthetic_corpus(seed=9, n_docs=1)[0]
        for max_len in (64, 100, 200):
            assert len(encode_source(doc, vocab, max_len).ids) == max_len

    def test_truncation_drops_whole_fragments(self):
        doc = doc_of(["AB", "CD", "EF"])
        v = build_vocab([doc], max_size=100)
        enc = encode_source(doc, v, max_len=7, order="given")
        # [BEG] A B [DSEP] C D [SEP]: third fragment gone entirely
        assert enc.dropped_fragments == 1
        assert enc.ids[-1] == v.sep_id

    def test_oversized_first_fragment_rejected(self):
        doc = doc_of(["ABCDEFGH"])
        v = build_vocab([doc], max_size=100)
        with pytest.raises(ValueError, match="first fragment"):
            encode_source(doc, v, max_len=4, order="given")

    def test_begins_with_beg_single_sep(self, vocab):
        doc = gen_synthetic_corpus(seed=11, n_docs=1)[0]
        enc = encode_source(doc, vocab, max_len=160)
        assert enc.ids[0] == vocab.beg_id
        assert enc.ids.count(vocab.sep_id) == 1
        assert enc.ids[enc.n_tokens - 1] == vocab.sep_id


class TestSerialization:
    def test_fixed_key_order(self):
        pairs = [KVPair("total", "9.80"), KVPair("company", "FOO LTD")]
        out = serialize_target(pairs, "fixed-key")
        assert out == "company : FOO LTD [DSEP] total : 9.80 [SEP]"

    def test_empty_pairs(self):
        assert serialize_target([], "spatial") == "[SEP]"

    def test_duplicate_key_rejected_in_fixed_mode(self):
        with pytest.raises(ValueError, match="duplicate"):
            serialize_target([KVPair("date", "a"), KVPair("date", "b")], "fixed-key")

    def test_parse_simple(self):
        pairs, bad = parse_generated("date : 02/01/2019 [SEP]")
        assert pairs == [KVPair("date", "02/01/2019")] and bad == 0

    def test_parse_skips_and_counts_malformed(self):
        pairs, bad = parse_generated("garbage [DSEP] a : b [SEP]")
        assert pairs == [KVPair("a", "b")] and bad == 1

    def test_parse_splits_first_colon_only(self):
        pairs, _ = parse_generated("time : 12:30:45 [SEP]")
        assert pairs == [KVPair("time", "12:30:45")]

    def test_parse_ignores_text_after_sep(self):
        pairs, bad = parse_generated("a : b [SEP] c : d")
        assert pairs == [KVPair("a", "b")] and bad == 0

    @settings(deadline=None, max_examples=200)
    @given(st.lists(st.tuples(
        st.text(alphabet="abcdefgh", min_size=1, max_size=6),
        st.text(alphabet="ABC 018.", min_size=1, max_size=10)), max_size=6))
    def test_roundtrip_property(self, raw):
        pairs = [KVPair(k, v.strip()) for k, v in raw if v.strip()]
        back, bad = parse_generated(serialize_target(pairs, "spatial"))
        assert back == pairs and bad == 0


class TestAugmentations:
    def test_shuffle_single_fragment_unchanged(self):
        doc = doc_of(["only"])
        assert shuffle_fragments(doc, 3).fragments == doc.fragments

    def test_shuffle_preserves_multiset_and_gold(self):
        doc = gen_synthetic_corpus(seed=2, n_docs=1)[0]
        shuffled = shuffle_fragments(doc, 7)
        key = lambda f: (f.text, f.box)
        assert sorted(map(key, shuffled.fragments)) == sorted(map(key, doc.fragments))
        assert shuffled.gold_pairs == doc.gold_pairs

    def test_shuffle_seeded_reproducible(self):
        doc = gen_synthetic_corpus(seed=2, n_docs=1)[0]
        assert shuffle_fragments(doc, 7).fragments == shuffle_fragments(doc, 7).fragments

    def test_noise_rate_zero_identity(self):
        doc = gen_synthetic_corpus(seed=2, n_docs=1)[0]
        assert inject_ocr_noise(doc, 0.0, 1).fragments == doc.fragments

    def test_noise_rate_one_follows_table(self):
        doc = doc_of(["018"])
        noisy = inject_ocr_noise(doc, 1.0, 1)
        assert noisy.fragments[0].text == "OlB"

    def test_noise_digraph(self):
        doc = doc_of(["corn m"])
        noisy = inject_ocr_noise(doc, 1.0, 1)
        assert noisy.fragments[0].text == "com rn"

    def test_gold_pairs_stay_clean(self):
        doc = gen_synthetic_corpus(seed=3, n_docs=1)[0]
        assert inject_ocr_noise(doc, 0.5, 4).gold_pairs == doc.gold_pairs

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError, match="rate"):
            inject_ocr_noise(doc_of(["x"]), 1.5, 0)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        docs = gen_synthetic_corpus(seed=4, n_docs=3)
        path = tmp_path / "ds.json"
        save_dataset(docs, path)
        assert load_dataset(path) == docs

    def test_missing_box_cites_fragment(self, tmp_path):
        payload = {"documents": [{"id": "d", "page_width": 10, "page_height": 10,
                                  "image": None,
                                  "fragments": [{"text": "a", "box": [0, 0, 5, 5]},
                                                {"text": "b"}],
                                  "gold_pairs": []}]}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(DatasetError, match=r"/documents/0/fragments/1.*box"):
            load_dataset(path)

    def test_inverted_box_rejected(self, tmp_path):
        payload = {"documents": [{"id": "d", "page_width": 10, "page_height": 10,
                                  "image": None,
                                  "fragments": [{"text": "a", "box": [6, 0, 5, 5]}],
                                  "gold_pairs": []}]}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(DatasetError, match="invalid extent"):
            load_dataset(path)
