import io
import math
import random

import pytest

import distillab as dl
from distillab.data import (
    PAD_ID,
    UNK_ID,
    DocumentStore,
    gen_synthetic,
    load_corpus,
    load_qids,
    load_qrels,
    load_queries,
    load_vocab,
    save_corpus,
    save_qids,
    save_qrels,
    save_queries,
    save_vocab,
    split_queries,
)
from distillab.errors import DataFormatError


def make_store(pairs):
    return DocumentStore([p[0] for p in pairs], [p[1] for p in pairs])


class TestVocabulary:
    def test_counts_with_min_freq_one(self):
        vocab = dl.build_vocab(make_store([("D1", "a b"), ("D2", "b c")]), [], min_freq=1)
        assert vocab.size == 7

    def test_frequency_threshold(self):
        vocab = dl.build_vocab(make_store([("D1", "a b"), ("D2", "b c")]), [], min_freq=2)
        assert vocab.size == 5
        assert "b" in vocab.token_to_id
        assert "a" not in vocab.token_to_id

    def test_deterministic(self):
        store = make_store([("D1", "x y z"), ("D2", "y q")])
        v1 = dl.build_vocab(store, ["z w"], min_freq=1)
        v2 = dl.build_vocab(store, ["z w"], min_freq=1)
        assert v1.token_to_id == v2.token_to_id

    def test_specials_distinct_and_in_range(self):
        vocab = dl.build_vocab(make_store([("D1", "a")]), [])
        ids = [vocab.token_to_id[t] for t in ("[PAD]", "[UNK]", "[CLS]", "[SEP]")]
        assert len(set(ids)) == 4
        assert all(i < vocab.size for i in ids)

    def test_round_trip_identity(self):
        vocab = dl.build_vocab(make_store([("D1", "alpha beta gamma")]), [])
        inverse = vocab.inverse()
        for token, idx in vocab.token_to_id.items():
            assert vocab.id_for(inverse[idx]) == idx
            assert inverse[vocab.token_to_id[token]] == token

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataFormatError, match="empty corpus"):
            dl.build_vocab(DocumentStore([], []), [])

    def test_queries_contribute(self):
        vocab = dl.build_vocab(make_store([("D1", "a")]), ["q r"], min_freq=1)
        assert "q" in vocab.token_to_id and "r" in vocab.token_to_id


class TestTokenize:
    @pytest.fixture()
    def vocab(self):
        return dl.build_vocab(make_store([("D1", "hello world x z a b c d")]), [])

    def test_pad_and_length(self, vocab):
        seq = dl.tokenize("Hello World", vocab, max_len=4)
        assert seq.length == 2
        assert seq.ids[:2] == (vocab.id_for("hello"), vocab.id_for("world"))
        assert seq.ids[2:] == (PAD_ID, PAD_ID)

    def test_unknown_token(self, vocab):
        seq = dl.tokenize("x y z", vocab, max_len=3)
        assert seq.ids == (vocab.id_for("x"), UNK_ID, vocab.id_for("z"))
        assert seq.length == 3

    def test_truncation(self, vocab):
        seq = dl.tokenize("a b c d", vocab, max_len=2)
        assert seq.ids == (vocab.id_for("a"), vocab.id_for("b"))
        assert seq.length == 2

    def test_empty_text(self, vocab):
        seq = dl.tokenize("", vocab, max_len=3)
        assert seq.length == 0
        assert all(i == PAD_ID for i in seq.ids)

    def test_deterministic(self, vocab):
        assert dl.tokenize("a b", vocab, 4) == dl.tokenize("a b", vocab, 4)

    def test_bad_max_len(self, vocab):
        with pytest.raises(ValueError):
            dl.tokenize("a", vocab, 0)


class TestLoaders:
    def test_corpus_line(self, tmp_path):
        path = tmp_path / "corpus.tsv"
        path.write_text("D1\thello world\n", encoding="utf-8")
        store = load_corpus(path)
        assert store.doc_ids == ["D1"]
        assert store.text_for("D1") == "hello world"

    def test_qrels_accumulate(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("Q1\tD1\nQ1\tD2\n", encoding="utf-8")
        qrels = load_qrels(path)
        assert set(qrels["Q1"]) == {"D1", "D2"}
        assert qrels["Q1"][0] == "D1"

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "corpus.tsv"
        path.write_text("D1\ta\njustonecolumn\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match=":2"):
            load_corpus(path)

    def test_duplicate_doc_id(self, tmp_path):
        path = tmp_path / "corpus.tsv"
        path.write_text("D1\ta\nD1\tb\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_corpus(path)

    def test_duplicate_query_id(self, tmp_path):
        path = tmp_path / "queries.tsv"
        path.write_text("Q1\ta\nQ1\tb\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_queries(path)

    def test_save_load_roundtrip(self, tmp_path):
        store = make_store([("D1", "a b"), ("D2", "c")])
        queries = {"Q1": "a", "Q2": "c d"}
        qrels = {"Q1": ["D1"], "Q2": ["D2", "D1"]}
        save_corpus(tmp_path / "c.tsv", store)
        save_queries(tmp_path / "q.tsv", queries)
        save_qrels(tmp_path / "r.tsv", qrels)
        save_qids(tmp_path / "ids.txt", ["Q1", "Q2"])
        assert load_corpus(tmp_path / "c.tsv").texts == store.texts
        assert load_queries(tmp_path / "q.tsv") == queries
        assert load_qrels(tmp_path / "r.tsv") == qrels
        assert load_qids(tmp_path / "ids.txt") == ["Q1", "Q2"]

    def test_vocab_roundtrip(self, tmp_path):
        vocab = dl.build_vocab(make_store([("D1", "a b c")]), [])
        save_vocab(tmp_path / "v.tsv", vocab)
        assert load_vocab(tmp_path / "v.tsv").token_to_id == dict(vocab.token_to_id)

    def test_tab_in_text_rejected_on_save(self, tmp_path):
        store = DocumentStore(["D1"], ["has\ttab"])
        with pytest.raises(DataFormatError):
            save_corpus(tmp_path / "c.tsv", store)


class TestTrainGroups:
    @pytest.fixture()
    def setup(self):
        store = make_store([(f"D{i}", f"w{i} w{i + 1}") for i in range(1, 5)])
        queries = {"Q1": "w1"}
        qrels = {"Q1": ["D1"]}
        vocab = dl.build_vocab(store, queries.values())
        return store, queries, qrels, vocab

    def test_deterministic_per_seed(self, setup):
        store, queries, qrels, vocab = setup
        g1 = dl.build_train_groups(queries, qrels, store, vocab, 3, 7, 4, 4)
        g2 = dl.build_train_groups(queries, qrels, store, vocab, 3, 7, 4, 4)
        assert g1 == g2
        assert g1[0].doc_ids[0] == "D1"
        assert g1[0].pos_idx == 0
        assert set(g1[0].doc_ids[1:]) <= {"D2", "D3", "D4"}

    def test_forced_pair(self, setup):
        store = make_store([("D1", "w1"), ("D2", "w2")])
        queries, qrels = {"Q1": "w1"}, {"Q1": ["D1"]}
        vocab = dl.build_vocab(store, queries.values())
        groups = dl.build_train_groups(queries, qrels, store, vocab, 2, 0, 4, 4)
        assert groups[0].doc_ids == ("D1", "D2")

    def test_group_size_exceeds_store(self, setup):
        store, queries, qrels, vocab = setup
        with pytest.raises(DataFormatError):
            dl.build_train_groups(queries, qrels, store, vocab, 5, 0, 4, 4)

    def test_not_enough_negatives(self):
        store = make_store([("D1", "w1"), ("D2", "w2")])
        queries, qrels = {"Q1": "w1"}, {"Q1": ["D1", "D2"]}
        vocab = dl.build_vocab(store, queries.values())
        with pytest.raises(DataFormatError, match="non-relevant"):
            dl.build_train_groups(queries, qrels, store, vocab, 2, 0, 4, 4)

    def test_negatives_never_relevant(self, setup):
        store, queries, qrels, vocab = setup
        for seed in range(20):
            groups = dl.build_train_groups(queries, qrels, store, vocab, 3, seed, 4, 4)
            for group in groups:
                assert group.doc_ids[group.pos_idx] in qrels[group.query_id]
                for j, doc_id in enumerate(group.doc_ids):
                    if j != group.pos_idx:
                        assert doc_id not in qrels[group.query_id]

    def test_missing_qrels_entry(self, setup):
        store, queries, qrels, vocab = setup
        with pytest.raises(DataFormatError):
            dl.build_train_groups({"QX": "w1"}, qrels, store, vocab, 2, 0, 4, 4)


def _serialize(store, queries, qrels):
    buf = io.StringIO()
    for d, t in zip(store.doc_ids, store.texts):
        buf.write(f"{d}|{t}\n")
    for q, t in queries.items():
        buf.write(f"{q}|{t}\n")
    for q, rels in qrels.items():
        buf.write(f"{q}|{','.join(rels)}\n")
    return buf.getvalue()


class TestGenSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(100, 10, 40, 8, 4, seed=7)
        b = gen_synthetic(100, 10, 40, 8, 4, seed=7)
        assert _serialize(*a) == _serialize(*b)

    def test_seeds_differ(self):
        a = gen_synthetic(100, 10, 40, 8, 4, seed=7)
        b = gen_synthetic(100, 10, 40, 8, 4, seed=8)
        assert _serialize(*a) != _serialize(*b)

    def test_exactly_one_qrels_entry(self):
        _, queries, qrels = gen_synthetic(100, 10, 40, 8, 4, seed=1)
        assert set(qrels) == set(queries)
        assert all(len(v) == 1 for v in qrels.values())

    def test_relevant_doc_shares_at_least_half(self):
        store, queries, qrels = gen_synthetic(100, 10, 40, 8, 4, seed=2)
        for qid, text in queries.items():
            qtok = set(text.split())
            dtok = set(store.text_for(qrels[qid][0]).split())
            assert len(qtok & dtok) >= math.ceil(len(qtok) / 2)

    def test_vocab_too_small(self):
        with pytest.raises(ValueError, match="distinct topics"):
            gen_synthetic(10, 5, 3, 8, 3, seed=0)

    def test_queries_not_more_than_docs(self):
        with pytest.raises(ValueError):
            gen_synthetic(5, 6, 40, 8, 4, seed=0)

    def test_overlap_oracle_mrr(self):
        """Token-overlap ranking must recover relevance on the generated set.

        Expected values were derived by running this oracle, which is
        independent of any trained model.
        """
        store, queries, qrels = gen_synthetic(500, 50, 60, 8, 4, seed=123)
        total = 0.0
        for qid, text in queries.items():
            qtok = set(text.split())
            scored = sorted(
                ((len(qtok & set(t.split())), doc_id) for doc_id, t in zip(store.doc_ids, store.texts)),
                key=lambda pair: (-pair[0], pair[1]),
            )
            relevant = set(qrels[qid])
            rr = 0.0
            for rank, (_, doc_id) in enumerate(scored[:10], start=1):
                if doc_id in relevant:
                    rr = 1.0 / rank
                    break
            total += rr
        assert total / len(queries) > 0.5


class TestSplitQueries:
    def test_split(self):
        queries = {f"Q{i}": f"text {i}" for i in range(10)}
        train, heldout = split_queries(queries, 7, 3)
        assert len(train) == 7 and len(heldout) == 3
        assert not (set(train) & set(heldout))

    def test_oversized_split(self):
        with pytest.raises(ValueError):
            split_queries({"Q1": "a"}, 1, 1)
