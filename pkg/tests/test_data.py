"""Dataset loading, preprocessing rules, and the synthetic generator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siarank.data import (
    Annotation,
    DatasetSplit,
    RelevanceRecord,
    SplitKind,
    SynthConfig,
    assemble_doc_repr,
    generate_synthetic,
    label_from_overlap,
    load_tsv,
    map_label,
    masked_doc_repr,
    preprocess_url,
    save_tsv,
)
from siarank.errors import DataError

TABLE3_URL = (
    "https://www.seznamzpravy.cz/clanek/novinka-pro-cerstve-otce-tyden-placene-"
    "dovolene-po-narozeni-potomka-41487?autoplay=1"
)
TABLE3_PROCESSED = (
    "seznamzpravy.cz/clanek/novinka pro cerstve otce tyden placene dovolene po "
    "narozeni potomka 41487?autoplay=1"
)


class TestLabelMapping:
    @pytest.mark.parametrize("split", list(SplitKind))
    def test_useful_and_not_useful(self, split):
        assert map_label(Annotation.USEFUL, split) == 1.0
        assert map_label(Annotation.NOT_USEFUL, split) == 0.0

    def test_little_useful(self):
        assert map_label(Annotation.LITTLE_USEFUL, SplitKind.TEST) == 0.75
        for split in (SplitKind.TRAIN_BIG, SplitKind.TRAIN_SMALL, SplitKind.DEV):
            assert map_label(Annotation.LITTLE_USEFUL, split) == 0.5

    def test_almost_not_useful(self):
        assert map_label(Annotation.ALMOST_NOT_USEFUL, SplitKind.TEST) == 0.25
        assert map_label(Annotation.ALMOST_NOT_USEFUL, SplitKind.TRAIN_BIG) == 0.25
        assert map_label(Annotation.ALMOST_NOT_USEFUL, SplitKind.DEV) == 0.5
        assert map_label(Annotation.ALMOST_NOT_USEFUL, SplitKind.TRAIN_SMALL) == 0.5


class TestPreprocessUrl:
    def test_reference_example_byte_for_byte(self):
        assert preprocess_url(TABLE3_URL) == TABLE3_PROCESSED

    def test_percent_and_plus(self):
        assert preprocess_url("a%20b+c") == "a b c"

    def test_empty(self):
        assert preprocess_url("") == ""

    def test_invalid_escape_verbatim(self):
        assert preprocess_url("a%zzb") == "a%zzb"

    def test_lowercases(self):
        assert preprocess_url("EXAMPLE.CZ/PaGe") == "example.cz/page"

    def test_scheme_removed_case_insensitively(self):
        assert preprocess_url("HTTPS://WWW.example.cz/x") == "example.cz/x"

    def test_separators_become_single_spaces(self):
        assert preprocess_url("a-b_c\td") == "a b c d"

    @given(st.text(alphabet=st.characters(blacklist_characters="%"), max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_idempotent_without_percent_escapes(self, text):
        once = preprocess_url(text)
        assert preprocess_url(once) == once

    def test_idempotent_on_reference_output(self):
        assert preprocess_url(TABLE3_PROCESSED) == TABLE3_PROCESSED


class TestAssembleDocRepr:
    def test_all_parts(self):
        assert assemble_doc_repr("t", "u", "b") == "title: t url: u bte: b"

    def test_title_only_mask(self):
        assert assemble_doc_repr("t", "u", "b", ("title",)) == "title: t"

    def test_empty_parts_keep_prefixes(self):
        assert assemble_doc_repr("", "", "") == "title:  url:  bte: "

    def test_unknown_part_rejected(self):
        with pytest.raises(DataError):
            assemble_doc_repr("t", "u", "b", ("title", "body"))

    @given(st.text(max_size=20), st.text(max_size=20), st.text(max_size=20))
    @settings(max_examples=100, deadline=None)
    def test_marker_counts(self, title, url, bte):
        for marker in (" url: ", " bte: "):
            if marker in title + url + bte:
                return
        repr_ = assemble_doc_repr(title, url, bte)
        assert repr_.count(" url: ") == 1
        assert repr_.count(" bte: ") == 1
        assert repr_.startswith("title: ")


def _write_tsv(path, rows, header="id\tquery\turl\tdoc\ttitle\tlabel"):
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")


class TestLoadTsv:
    def test_roundtrip_identity(self, tmp_path, tiny_synth):
        train, _, _ = tiny_synth
        path = tmp_path / "train.tsv"
        save_tsv(train, path)
        loaded = load_tsv(path, SplitKind.TRAIN_BIG)
        assert loaded.records == train.records
        # serialize again: byte-identical files
        path2 = tmp_path / "again.tsv"
        save_tsv(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_label_parsing(self, tmp_path):
        path = tmp_path / "one.tsv"
        _write_tsv(path, ["q1\tcat\thttp://a.cz\tbody text\ta title\t1.0"])
        split = load_tsv(path, SplitKind.TEST)
        assert split.records[0].label == 1.0

    def test_doc_repr_assembled(self, tmp_path):
        path = tmp_path / "one.tsv"
        _write_tsv(path, ["q1\tcat\thttps://www.a.cz/x-y\tbody\tttl\t0.5"])
        split = load_tsv(path, SplitKind.TEST)
        assert split.records[0].doc_repr == "title: ttl url: a.cz/x y bte: body"

    def test_empty_doc_dropped_only_in_training(self, tmp_path):
        rows = ["q1\tcat\thttp://a.cz\t\t\t0.5", "q1\tcat\thttp://b.cz\tbody\tt\t1.0"]
        path = tmp_path / "s.tsv"
        _write_tsv(path, rows)
        for kind in (SplitKind.TRAIN_BIG, SplitKind.TRAIN_SMALL):
            split = load_tsv(path, kind)
            assert len(split) == 1 and split.dropped_empty == 1
        for kind in (SplitKind.DEV, SplitKind.TEST):
            split = load_tsv(path, kind)
            assert len(split) == 2 and split.dropped_empty == 0

    def test_header_only_file(self, tmp_path):
        path = tmp_path / "empty.tsv"
        _write_tsv(path, [])
        split = load_tsv(path, SplitKind.TEST)
        assert len(split) == 0 and len(split.grouping) == 0

    def test_wrong_column_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        _write_tsv(path, ["q1\tcat\thttp://a.cz\tbody\ttitle"])
        with pytest.raises(DataError, match="line 2"):
            load_tsv(path, SplitKind.TEST)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "bad.tsv"
        _write_tsv(path, ["q1\tcat\thttp://a.cz\tbody\ttitle\t1.5"])
        with pytest.raises(DataError, match="outside"):
            load_tsv(path, SplitKind.TEST)

    def test_unparseable_label(self, tmp_path):
        path = tmp_path / "bad.tsv"
        _write_tsv(path, ["q1\tcat\thttp://a.cz\tbody\ttitle\thigh"])
        with pytest.raises(DataError, match="bad label"):
            load_tsv(path, SplitKind.TEST)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.tsv"
        _write_tsv(path, [], header="id\tquery\turl\ttitle\tdoc\tlabel")
        with pytest.raises(DataError, match="header"):
            load_tsv(path, SplitKind.TEST)

    def test_duplicate_pair_rejected(self, tmp_path):
        rows = ["q1\tcat\thttp://a.cz\tbody\tt\t0.5", "q2\tcat\thttp://a.cz\tbody\tt\t1.0"]
        path = tmp_path / "dup.tsv"
        _write_tsv(path, rows)
        with pytest.raises(DataError, match="duplicate"):
            load_tsv(path, SplitKind.TEST)

    def test_save_rejects_tab_in_field(self, tmp_path):
        rec = RelevanceRecord("q", "cat", "http://a.cz", "t\tab", "b", "d", 0.5,
                              SplitKind.TEST)
        split = DatasetSplit(kind=SplitKind.TEST, records=[rec])
        with pytest.raises(DataError, match="tab"):
            save_tsv(split, tmp_path / "x.tsv")


class TestMaskedDocRepr:
    def test_mask_subsets(self, tiny_synth):
        rec = tiny_synth[0].records[0]
        assert masked_doc_repr(rec, ("title",)) == f"title: {rec.title}"
        assert masked_doc_repr(rec, ("bte",)) == f"bte: {rec.bte}"
        assert masked_doc_repr(rec, ("title", "url", "bte")) == rec.doc_repr


class TestSynthetic:
    def test_determinism(self):
        cfg = SynthConfig(vocab_size=80, n_queries=6, docs_per_query=10,
                          relevant_fraction=0.3, noise=0.2, seed=42)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        for split_a, split_b in zip(a, b):
            assert split_a.records == split_b.records

    def test_full_overlap_doc_has_label_one(self):
        cfg = SynthConfig(vocab_size=80, n_queries=6, docs_per_query=10,
                          relevant_fraction=0.3, noise=0.0, seed=1)
        train, _, _ = generate_synthetic(cfg)
        for qid, idxs in train.grouping.items():
            terms = set(train.records[idxs[0]].query.split())
            for i in idxs:
                rec = train.records[i]
                title_terms = set(rec.title.split())
                bte_terms = set(rec.bte.split())
                if terms <= title_terms and terms <= bte_terms:
                    assert rec.label == 1.0
                    break
            else:
                pytest.fail(f"query {qid} has no full-overlap document")

    def test_label_is_monotone_function_of_overlap(self):
        cfg = SynthConfig(vocab_size=80, n_queries=8, docs_per_query=12,
                          relevant_fraction=0.4, noise=0.0, seed=3)
        train, _, _ = generate_synthetic(cfg)
        for rec in train.records:
            terms = rec.query.split()
            o_title = len(set(terms) & set(rec.title.split())) / len(terms)
            o_bte = len(set(terms) & set(rec.bte.split())) / len(terms)
            assert rec.label == label_from_overlap((o_title + o_bte) / 2.0)

    def test_grouping_partition(self, tiny_synth):
        for split in tiny_synth:
            seen = sorted(i for idxs in split.grouping.values() for i in idxs)
            assert seen == list(range(len(split.records)))

    def test_random_p10_matches_hypergeometric_expectation(self):
        cfg = SynthConfig(vocab_size=150, n_queries=40, docs_per_query=50,
                          relevant_fraction=0.3, noise=0.0, seed=5)
        train, _, _ = generate_synthetic(cfg)
        rng = np.random.default_rng(0)
        hits = []
        for qid, idxs in train.grouping.items():
            labels = np.array([train.records[i].label for i in idxs])
            for _ in range(20):
                pick = rng.permutation(len(labels))[:10]
                hits.append((labels[pick] > 0.5).sum() / 10.0)
        assert math.isclose(float(np.mean(hits)) * 100, 30.0, abs_tol=2.0)

    def test_oracle_beats_random_by_construction(self, tiny_synth):
        train, _, _ = tiny_synth
        for qid, idxs in train.grouping.items():
            labels = sorted((train.records[i].label for i in idxs), reverse=True)
            oracle = sum(1 for v in labels[:10] if v > 0.5) / 10.0
            random_exp = sum(1 for v in labels if v > 0.5) / len(labels)
            assert oracle >= random_exp

    def test_invalid_configs_rejected(self):
        with pytest.raises(DataError):
            SynthConfig(docs_per_query=9).validate()
        with pytest.raises(DataError):
            SynthConfig(relevant_fraction=0.0).validate()
        with pytest.raises(DataError):
            SynthConfig(noise=1.5).validate()
        with pytest.raises(DataError):
            generate_synthetic(SynthConfig(n_queries=0))
