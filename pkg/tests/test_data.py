"""Tests for MIND-format parsing, serialization, and sample construction."""

from pathlib import Path

import numpy as np
import pytest

from persona_rec.data import (
    Impression,
    make_training_samples,
    parse_behaviors_file,
    parse_news_file,
    serialize_impression,
    serialize_news_item,
    write_behaviors_file,
    write_news_file,
)
from persona_rec.errors import ParseError
from persona_rec.persona import EntityVocabulary
from persona_rec.text import UNK_ID, Vocabulary

FIXTURES = Path(__file__).parent / "fixtures"


def parse_fixture_news(**kwargs):
    vocab, evocab = Vocabulary(), EntityVocabulary()
    store = parse_news_file(FIXTURES / "news.tsv", vocab, evocab,
                            build_vocab=True, **kwargs)
    return store, vocab, evocab


class TestNewsParsing:
    def test_ten_items_parsed(self):
        store, vocab, evocab = parse_fixture_news()
        assert len(store) == 10
        assert len(vocab) > 2 and len(evocab) > 2

    def test_empty_abstract_is_all_pad(self):
        store, _, _ = parse_fixture_news()
        item = store["N03"]
        assert not item.abstract.mask.any()
        assert item.raw_abstract == ""

    def test_entity_order_title_then_abstract(self):
        store, _, evocab = parse_fixture_news()
        item = store["N01"]
        assert item.title_entities == ["Q121783", "Q131364"]
        assert item.abstract_entities == ["Q36159"]
        assert item.entity_ids == [evocab.id_of("Q121783"), evocab.id_of("Q131364"),
                                   evocab.id_of("Q36159")]

    def test_title_only_entity_source(self):
        store, _, evocab = parse_fixture_news(entity_source="title")
        assert len(store["N01"].entity_ids) == 2
        assert store["N08"].entity_ids == []

    def test_malformed_entity_json_treated_as_empty(self, caplog):
        with caplog.at_level("WARNING", logger="persona_rec.data"):
            store, _, _ = parse_fixture_news()
        assert store["N07"].entity_ids == []
        assert any("malformed entity JSON" in m for m in caplog.messages)

    def test_unknown_tokens_map_to_unk_without_build(self):
        _, vocab, evocab = parse_fixture_news()
        fresh = parse_news_file(FIXTURES / "news.tsv", Vocabulary(), EntityVocabulary(),
                                build_vocab=False)
        item = fresh["N01"]
        assert np.all(item.title.ids[item.title.mask] == UNK_ID)
        assert all(e == UNK_ID for e in item.entity_ids)

    def test_wrong_column_count_raises_with_line_number(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("N1\tcat\tsub\ttitle only four\n", encoding="utf-8")
        with pytest.raises(ParseError) as ei:
            parse_news_file(bad, Vocabulary(), EntityVocabulary())
        assert "line 1" in str(ei.value)

    def test_empty_title_rejected(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("N1\tcat\tsub\t...\tabstract\tu\t[]\t[]\n", encoding="utf-8")
        with pytest.raises(ParseError):
            parse_news_file(bad, Vocabulary(), EntityVocabulary())

    def test_vocabulary_build_is_deterministic(self):
        _, v1, e1 = parse_fixture_news()
        _, v2, e2 = parse_fixture_news()
        assert v1.tokens() == v2.tokens()
        assert e1.tokens() == e2.tokens()

    def test_round_trip_field_for_field(self, tmp_path):
        store, vocab, evocab = parse_fixture_news()
        out = tmp_path / "rewritten.tsv"
        write_news_file(out, store.values())
        reparsed = parse_news_file(out, vocab, evocab, build_vocab=False)
        assert list(reparsed) == list(store)
        for nid, orig in store.items():
            item = reparsed[nid]
            assert item.news_id == orig.news_id
            assert item.raw_title == orig.raw_title
            assert item.raw_abstract == orig.raw_abstract
            assert item.category == orig.category
            assert item.title_entities == orig.title_entities
            assert item.abstract_entities == orig.abstract_entities
            assert item.entity_ids == orig.entity_ids
            assert np.array_equal(item.title.ids, orig.title.ids)
            assert np.array_equal(item.abstract.ids, orig.abstract.ids)


class TestBehaviorsParsing:
    def test_skips_unknown_news_and_keeps_the_rest(self, caplog):
        store, _, _ = parse_fixture_news()
        with caplog.at_level("WARNING", logger="persona_rec.data"):
            imps = parse_behaviors_file(FIXTURES / "behaviors.tsv", store)
        assert len(imps) == 9  # line 6 references N99
        assert all(imp.impression_id != "6" for imp in imps)
        assert any("unknown news id" in m for m in caplog.messages)

    def test_empty_history_is_cold_start(self):
        store, _, _ = parse_fixture_news()
        imps = parse_behaviors_file(FIXTURES / "behaviors.tsv", store)
        cold = next(i for i in imps if i.impression_id == "3")
        assert cold.history == []
        assert cold.candidates == [("N04", 1), ("N07", 0)]

    def test_candidate_parsing(self):
        store, _, _ = parse_fixture_news()
        imps = parse_behaviors_file(FIXTURES / "behaviors.tsv", store)
        first = imps[0]
        assert first.user_id == "U100"
        assert first.history == ["N01", "N05"]
        assert first.candidates == [("N02", 0), ("N06", 1), ("N04", 0)]
        assert first.when is not None and first.when.year == 2019

    def test_history_truncation_keeps_newest(self, tmp_path):
        store, _, _ = parse_fixture_news()
        hist = " ".join(["N01", "N02"] * 15)
        f = tmp_path / "b.tsv"
        f.write_text(f"1\tU1\t11/11/2019 9:00:00 AM\t{hist}\tN03-1 N04-0\n",
                     encoding="utf-8")
        imps = parse_behaviors_file(f, store, n_u=20)
        assert len(imps[0].history) == 20
        assert imps[0].history == hist.split()[-20:]

    def test_unlabeled_candidate_raises(self, tmp_path):
        store, _, _ = parse_fixture_news()
        f = tmp_path / "b.tsv"
        f.write_text("1\tU1\t11/11/2019 9:00:00 AM\tN01\tN02\n", encoding="utf-8")
        with pytest.raises(ParseError) as ei:
            parse_behaviors_file(f, store)
        assert "-0/-1" in str(ei.value)

    def test_bad_label_raises(self, tmp_path):
        store, _, _ = parse_fixture_news()
        f = tmp_path / "b.tsv"
        f.write_text("1\tU1\t11/11/2019 9:00:00 AM\tN01\tN02-2\n", encoding="utf-8")
        with pytest.raises(ParseError):
            parse_behaviors_file(f, store)

    def test_round_trip_reproduces_unskipped_lines(self, tmp_path):
        store, _, _ = parse_fixture_news()
        imps = parse_behaviors_file(FIXTURES / "behaviors.tsv", store)
        original = [ln for ln in (FIXTURES / "behaviors.tsv").read_text().splitlines()
                    if not ln.startswith("6\t")]
        assert [serialize_impression(i) for i in imps] == original
        out = tmp_path / "b.tsv"
        write_behaviors_file(out, imps)
        again = parse_behaviors_file(out, store)
        assert [serialize_impression(i) for i in again] == original


class TestTrainingSamples:
    def imp(self, history, candidates, iid="1", user="U1"):
        return Impression(iid, user, "11/11/2019 9:00:00 AM", history, candidates)

    def test_single_positive_uses_all_four_negatives(self):
        imp = self.imp(["N1"], [("P", 1), ("A", 0), ("B", 0), ("C", 0), ("D", 0)])
        samples = make_training_samples([imp], H=4, rng=np.random.default_rng(0))
        assert len(samples) == 1
        s = samples[0]
        assert s.positive == "P"
        assert sorted(s.negatives) == ["A", "B", "C", "D"]
        assert s.history == ["N1"]

    def test_two_positives_give_two_samples(self):
        imp = self.imp(["N1"], [("P1", 1), ("P2", 1), ("A", 0), ("B", 0)])
        samples = make_training_samples([imp], H=2, rng=np.random.default_rng(0))
        assert [s.positive for s in samples] == ["P1", "P2"]

    def test_shortfall_samples_with_replacement(self):
        imp = self.imp(["N1"], [("P", 1), ("A", 0)])
        samples = make_training_samples([imp], H=4, rng=np.random.default_rng(0))
        assert samples[0].negatives == ["A"] * 4

    def test_negatives_never_include_positive(self):
        rng = np.random.default_rng(1)
        imp = self.imp(["N1"], [("P", 1), ("A", 0), ("B", 0)])
        for _ in range(20):
            for s in make_training_samples([imp], H=2, rng=rng):
                assert "P" not in s.negatives

    def test_no_negatives_skipped(self, caplog):
        imp = self.imp(["N1"], [("P", 1)])
        with caplog.at_level("WARNING", logger="persona_rec.data"):
            samples = make_training_samples([imp], H=4, rng=np.random.default_rng(0))
        assert samples == []

    def test_cold_start_impressions_excluded(self):
        imp = self.imp([], [("P", 1), ("A", 0)])
        assert make_training_samples([imp], H=2, rng=np.random.default_rng(0)) == []

    def test_seeded_determinism(self):
        store, _, _ = parse_fixture_news()
        imps = parse_behaviors_file(FIXTURES / "behaviors.tsv", store)
        a = make_training_samples(imps, H=4, rng=np.random.default_rng(7))
        b = make_training_samples(imps, H=4, rng=np.random.default_rng(7))
        assert [(s.user_id, s.positive, s.negatives) for s in a] == \
               [(s.user_id, s.positive, s.negatives) for s in b]
