"""Loaders, the command-language oracle, splits, and corpus statistics."""

import numpy as np
import pytest

from seqrecomb import corpus as C


@pytest.fixture(scope="module")
def scan_corpus():
    return C.generate_corpus()


class TestScanInterpret:
    @pytest.mark.parametrize("cmd,expected", [
        ("jump", "I_JUMP"),
        ("walk twice after jump twice", "I_JUMP I_JUMP I_WALK I_WALK"),
        ("run right after jump twice", "I_JUMP I_JUMP I_TURN_RIGHT I_RUN"),
        ("jump left and jump around right",
         "I_TURN_LEFT I_JUMP " + "I_TURN_RIGHT I_JUMP " * 3 + "I_TURN_RIGHT I_JUMP"),
        ("turn around left and jump around left",
         "I_TURN_LEFT " * 4 + "I_TURN_LEFT I_JUMP " * 3 + "I_TURN_LEFT I_JUMP"),
        ("turn opposite right", "I_TURN_RIGHT I_TURN_RIGHT"),
        ("walk opposite left thrice",
         "I_TURN_LEFT I_TURN_LEFT I_WALK " * 2 + "I_TURN_LEFT I_TURN_LEFT I_WALK"),
    ])
    def test_known_commands(self, cmd, expected):
        assert C.scan_interpret(cmd.split()) == expected.split()

    @pytest.mark.parametrize("bad", [
        "jump jump", "walk and", "opposite walk left", "and walk",
        "walk around", "turn twice thrice", "walk and run and look",
        "walk backwards", "", "twice",
    ])
    def test_invalid_commands_return_none(self, bad):
        assert C.scan_interpret(bad.split()) is None

    def test_agrees_with_entire_corpus(self, scan_corpus):
        for d in scan_corpus:
            assert C.scan_interpret(d.x) == list(d.y)

    def test_corpus_size(self, scan_corpus):
        # 34 verb phrases -> 102 sentences -> 102 + 2*102^2 commands
        assert len(scan_corpus) == 20910
        assert len({d.x for d in scan_corpus}) == 20910


class TestScanSplits:
    def test_jump_split_counts(self, scan_corpus):
        split = C.jump_split(scan_corpus)
        assert len(split.train) == 13204
        assert len(split.tests["jump"]) == 7706
        assert sum(1 for d in split.train if "jump" in d.x) == 1
        assert all("jump" in d.x for d in split.tests["jump"])

    def test_around_right_split_counts(self, scan_corpus):
        split = C.around_right_split(scan_corpus)
        assert len(split.train) == 15225
        assert len(split.tests["around_right"]) == 5685
        for d in split.train:
            assert not C._contains_around_right(d.x)

    def test_splits_partition(self, scan_corpus):
        for split in (C.jump_split(scan_corpus), C.around_right_split(scan_corpus)):
            split.check()  # raises on overlap
            total = len(split.train) + sum(len(t) for t in split.tests.values())
            assert total == len(scan_corpus)


class TestScanIO:
    def test_load_basic(self, tmp_path):
        p = tmp_path / "data.txt"
        p.write_text("IN: jump OUT: JUMP\n"
                     "IN: run right after jump twice OUT: JUMP JUMP RTURN RUN\n")
        data = C.load_scan(p)
        assert data[0].x == ("jump",) and data[0].y == ("I_JUMP",)
        assert len(data[1].x) == 5 and len(data[1].y) == 4

    def test_two_token_action_rendering_accepted(self, tmp_path):
        p = tmp_path / "data.txt"
        p.write_text("IN: jump left OUT: TURN LEFT JUMP\n")
        (d,) = C.load_scan(p)
        assert d.y == ("I_TURN_LEFT", "I_JUMP")
        assert C.display_actions(d.y) == "TURN LEFT JUMP"

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_text("")
        assert C.load_scan(p) == []

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("IN: jump OUT: JUMP\njump JUMP\n")
        with pytest.raises(ValueError, match=":2:"):
            C.load_scan(p)

    def test_write_read_roundtrip(self, tmp_path, scan_corpus):
        p = tmp_path / "rt.txt"
        sample = scan_corpus[:50]
        C.write_scan(p, sample)
        assert C.load_scan(p) == sample


class TestSigmorphon:
    def test_load_example(self, tmp_path):
        p = tmp_path / "es.tsv"
        p.write_text("duplicar\tduplicaráis\tV;IND;FUT;2;PL\n")
        (d,) = C.load_sigmorphon(p)
        assert d.tags == ("V", "IND", "FUT", "2", "PL")
        assert d.lemma == tuple("duplicar")
        assert d.inflection == tuple("duplicaráis")
        # analysis order: x is the surface form, y is lemma + tags
        assert d.x == tuple("duplicaráis")
        assert d.y == tuple("duplicar") + d.tags

    def test_three_tag_datum(self, tmp_path):
        p = tmp_path / "tr.tsv"
        p.write_text("jöle\tjöleleri\tN;ACC;PL\n")
        (d,) = C.load_sigmorphon(p)
        assert len(d.tags) == 3

    def test_wrong_field_count_errors(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("lemma\tform\n")
        with pytest.raises(ValueError, match="3 tab-separated"):
            C.load_sigmorphon(p)

    def test_multiword_lemma_tokenization(self, tmp_path):
        p = tmp_path / "tr.tsv"
        p.write_text("karadan havaya füze\tkaradan havaya füzel\tN;DAT;PL\n")
        (d,) = C.load_sigmorphon(p)
        assert C.SPACE_CHAR in d.lemma
        assert " " not in d.lemma

    def test_roundtrip(self, tmp_path):
        data = C.generate_morph_fixture(5, 5, 20, seed=3)
        p = tmp_path / "fx.tsv"
        C.write_sigmorphon(p, data)
        assert C.load_sigmorphon(p) == data


class TestDatumViews:
    def test_round_trip_identity(self):
        d = C.morph_datum("duplicar", "duplicaráis", ["V", "IND", "FUT", "2", "PL"])
        assert C.datum_views(C.datum_views(d)) == d

    def test_reinflection_layout(self):
        d = C.morph_datum("duplicar", "duplicaráis", ["V", "IND", "FUT", "2", "PL"])
        r = C.datum_views(d)
        assert r.order == "reinflection"
        assert r.x == tuple("duplicar") + ("V", "IND", "FUT", "2", "PL")
        assert r.y == tuple("duplicaráis")

    def test_scan_datum_rejected(self):
        d = C.Datum(x=("jump",), y=("I_JUMP",), task="scan")
        with pytest.raises(ValueError):
            C.datum_views(d)


@pytest.fixture(scope="module")
def pool():
    return C.generate_morph_fixture(140, 140, 1400, seed=11)


class TestFewshotSplit:

    def test_hint_counts(self, pool):
        split = C.build_fewshot_split(pool, hints=8, seed=0)
        assert len(split.train) == 1000
        assert sum(1 for d in split.train if "PST" in d.tags) == 8
        assert sum(1 for d in split.train if "FUT" in d.tags) == 8
        for name in ("pst", "fut", "other"):
            assert len(split.tests[name]) == 100

    def test_zero_hints(self, pool):
        split = C.build_fewshot_split(pool, hints=0, seed=0)
        assert not any("PST" in d.tags or "FUT" in d.tags for d in split.train)

    def test_determinism(self, pool):
        s1 = C.build_fewshot_split(pool, hints=8, seed=5)
        s2 = C.build_fewshot_split(pool, hints=8, seed=5)
        assert s1.train == s2.train and s1.tests == s2.tests

    def test_partition(self, pool):
        split = C.build_fewshot_split(pool, hints=8, seed=1)
        train_flats = {d.flat for d in split.train}
        for test in split.tests.values():
            assert not train_flats & {d.flat for d in test}

    def test_insufficient_tense_coverage_errors(self):
        pool = C.generate_morph_fixture(2, 2, 1300, seed=0)
        with pytest.raises(ValueError, match="tense coverage"):
            C.build_fewshot_split(pool, hints=8, seed=0)

    def test_small_split_sizes(self):
        pool = C.generate_morph_fixture(40, 40, 160, seed=2)
        split = C.build_fewshot_split(pool, hints=8, seed=0,
                                      train_size=120, test_size=25)
        assert len(split.train) == 120
        assert sum(1 for d in split.train if "PST" in d.tags) == 8


class TestTokenMarginals:
    def test_counting(self):
        data = [C.Datum(x=(w,), y=(w.upper(),)) for w in ("jump", "walk", "run", "look")]
        m = C.token_marginals(data)
        assert m["jump"] == 0.25
        assert m[C.SEP] == 1.0
        assert "fly" not in m

    def test_values_in_unit_interval(self):
        data = C.generate_corpus()[:500]
        m = C.token_marginals(data)
        assert all(0.0 < v <= 1.0 for v in m.values())

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            C.token_marginals([])


class TestVocabulary:
    def test_bijection_and_reserved(self):
        data = C.generate_corpus()[:100]
        vocab = C.Vocabulary.from_data(data)
        assert len(vocab.id_to_token) == len(vocab.token_to_id)
        for i, t in enumerate(vocab.id_to_token):
            assert vocab.token_to_id[t] == i
        assert vocab.id_to_token[vocab.pad] == C.PAD
        assert vocab.decode(vocab.encode(["walk", "nonsense"])) == ["walk", C.UNK]


class TestLineFormat:
    def test_roundtrip_with_provenance(self, tmp_path):
        data = C.generate_corpus()[:10]
        prov = [{"protos": [i, i + 1], "strategy": "beam"} for i in range(10)]
        p = tmp_path / "aug.txt"
        C.write_lines(p, data, prov)
        got, got_prov = C.read_lines(p, task="scan")
        assert [g.flat for g in got] == [d.flat for d in data]
        assert got_prov == prov

    def test_single_separator_enforced(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text(f"a b {C.SEP} c {C.SEP} d\n")
        with pytest.raises(ValueError, match="exactly one"):
            C.read_lines(p)


class TestMorphFixture:
    def test_counts_and_determinism(self):
        d1 = C.generate_morph_fixture(10, 10, 50, seed=9)
        d2 = C.generate_morph_fixture(10, 10, 50, seed=9)
        assert d1 == d2
        assert len(d1) == 70
        assert sum(1 for d in d1 if "PST" in d.tags) == 10
        assert sum(1 for d in d1 if "FUT" in d.tags) == 10

    def test_forms_follow_suffix_rules(self):
        for d in C.generate_morph_fixture(20, 20, 0, seed=4):
            tense = d.tags[2]
            stem = "".join(d.lemma)[:-2]  # strip the lemma's -er ending
            form = "".join(d.inflection)
            assert form.startswith(stem + C._FX_TENSE_SUFFIX[tense])
