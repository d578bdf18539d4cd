"""
Tests for corpus loading, validation, vocabulary, MRC instances and statistics.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from gridner.core.exceptions import ConfigError, ContractError, CorpusParseError, CorpusValidationError
from gridner.schemas.corpus import ENTITY_TYPES, TYPE_TO_ID, SentenceRecord, Vocab
from gridner.services.corpus_service import (
    QUERIES,
    build_instance,
    build_instances,
    build_vocab,
    compare_stats,
    compute_stats,
    contains,
    load_corpus,
    mlm_corpus,
    nesting_roles,
    query_for,
    render_stats_markdown,
    validate,
)
from gridner.services.prediction_service import decode_grid
from tests.helpers import make_record


def write_json(path, payload):
    path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
    return path


# =============================================================================
# load_corpus / validate
# =============================================================================

def test_load_empty_corpus(tmp_path):
    assert load_corpus(write_json(tmp_path / "empty.json", [])) == []


def test_load_single_record(tmp_path):
    path = write_json(tmp_path / "one.json", [{
        "text": "细胞增生",
        "entities": [{"start_idx": 0, "end_idx": 1, "type": "bod", "entity": "细胞"}],
    }])
    (record,) = load_corpus(path)
    assert record.text == "细胞增生"
    assert record.spans() == [(0, 1, "bod")]


def test_load_surface_mismatch_names_record(tmp_path):
    path = write_json(tmp_path / "bad.json", [
        {"text": "细胞增生", "entities": []},
        {"text": "细胞增生", "entities": [{"start_idx": 0, "end_idx": 1, "type": "bod", "entity": "增生"}]},
    ])
    with pytest.raises(CorpusValidationError) as info:
        load_corpus(path)
    assert info.value.record_index == 1
    assert info.value.violations[0].startswith("record 1:")


def test_load_unknown_type_is_a_validation_error(tmp_path):
    path = write_json(tmp_path / "bad.json", [
        {"text": "细胞增生", "entities": [{"start_idx": 0, "end_idx": 1, "type": "xyz", "entity": "细胞"}]},
    ])
    with pytest.raises(CorpusValidationError) as info:
        load_corpus(path)
    assert "xyz" in info.value.message


def test_load_malformed_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('[\n  {"text": "a",\n  oops\n]', encoding="utf-8")
    with pytest.raises(CorpusParseError) as info:
        load_corpus(path)
    assert info.value.detail["line"] == 3


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "missing.json")


def test_load_removes_duplicate_entities(tmp_path, caplog):
    entity = {"start_idx": 0, "end_idx": 1, "type": "bod", "entity": "细胞"}
    path = write_json(tmp_path / "dup.json", [{"text": "细胞增生", "entities": [entity, dict(entity)]}])
    (record,) = load_corpus(path)
    assert len(record.entities) == 1
    assert "duplicate" in caplog.text


def test_load_does_not_modify_input(tmp_path):
    path = write_json(tmp_path / "one.json", [{"text": "细胞增生", "entities": []}])
    before = path.read_bytes()
    load_corpus(path)
    assert path.read_bytes() == before


def test_validate_valid_record():
    assert validate(make_record("细胞增生", [(0, 1, "bod")])) == []


def test_validate_off_by_one_end():
    record = SentenceRecord.model_validate(
        {"text": "细胞增生", "entities": [{"start_idx": 2, "end_idx": 4, "type": "dis", "entity": "增生"}]}
    )
    violations = validate(record)
    assert len(violations) == 1
    assert "out of bounds" in violations[0]


def test_validate_unknown_type():
    record = SentenceRecord.model_validate(
        {"text": "细胞增生", "entities": [{"start_idx": 0, "end_idx": 1, "type": "xyz", "entity": "细胞"}]}
    )
    violations = validate(record)
    assert len(violations) == 1
    assert "unknown type" in violations[0]


def test_offsets_are_code_points():
    record = make_record("患儿1例发生高血压", [(6, 8, "sym")])
    assert validate(record) == []
    assert record.entities[0].surface == "高血压"


def test_fixture_corpus_loads(fixture_records):
    assert len(fixture_records) == 16
    assert sum(len(r.entities) for r in fixture_records) == 43


# =============================================================================
# Vocabulary
# =============================================================================

def test_vocab_order_by_frequency_then_code_point():
    vocab = build_vocab([SentenceRecord(text="aa b")])
    assert vocab.tokens[:5] == list(Vocab.SPECIALS)
    assert vocab.tokens[5:] == ["a", " ", "b"]


def test_vocab_is_deterministic():
    records = [SentenceRecord(text="aa b"), SentenceRecord(text="细胞增生")]
    assert build_vocab(records).tokens == build_vocab(list(records)).tokens


def test_vocab_min_freq():
    vocab = build_vocab([SentenceRecord(text="aa b")], min_freq=2)
    assert vocab.tokens[5:] == ["a"]
    assert vocab.id_of("b") == Vocab.UNK


def test_vocab_empty_corpus():
    with pytest.raises(ContractError):
        build_vocab([])


def test_vocab_extra_texts_cover_queries(fixture_records):
    vocab = build_vocab(fixture_records, extra_texts=QUERIES.values())
    assert all(ch in vocab for query in QUERIES.values() for ch in query)


def test_vocab_fingerprint_tracks_tokens():
    a = build_vocab([SentenceRecord(text="ab")])
    b = build_vocab([SentenceRecord(text="abc")])
    assert a.fingerprint() == Vocab(list(a.tokens)).fingerprint()
    assert a.fingerprint() != b.fingerprint()


# =============================================================================
# Queries and instances
# =============================================================================

@pytest.mark.parametrize("entity_type,query", [
    ("bod", "在文本中找出身体部位，例如细胞、皮肤、抗体"),
    ("dep", "在文本中找出科室，例如科、室"),
    ("sym", "在文本中找出临床表现，例如疼痛、痉挛、异常"),
])
def test_query_for(entity_type, query):
    assert query_for(entity_type) == query


def test_every_type_has_a_query():
    assert set(QUERIES) == set(ENTITY_TYPES)


def test_query_for_unknown_type():
    with pytest.raises(ConfigError):
        query_for("xyz")


@pytest.fixture
def cell_record():
    return make_record("细胞增生", [(0, 1, "bod"), (2, 3, "dis")])


@pytest.fixture
def cell_vocab(cell_record):
    return build_vocab([cell_record], extra_texts=QUERIES.values())


def test_instance_layout(cell_record, cell_vocab):
    instance = build_instance(cell_record, "bod", cell_vocab)
    offset = len(query_for("bod")) + 2
    assert instance.context_offset == offset
    assert instance.context_len == 4
    assert instance.token_ids[0] == Vocab.CLS
    assert instance.token_ids[offset - 1] == Vocab.SEP
    assert instance.token_ids[-1] == Vocab.SEP
    assert instance.length == offset + 4 + 1


def test_instance_answer_cell(cell_record, cell_vocab):
    instance = build_instance(cell_record, "bod", cell_vocab)
    offset = instance.context_offset
    assert instance.label_grid[offset + 0, offset + 1] == 1 + TYPE_TO_ID["bod"]
    assert int(np.count_nonzero(instance.label_grid)) == 1
    assert instance.gold == ((0, 1, "bod"),)


def test_instance_binary_scheme(cell_record, cell_vocab):
    instance = build_instance(cell_record, "dis", cell_vocab, label_scheme="binary")
    assert set(np.unique(instance.label_grid)) == {0, 1}


def test_negative_instance_keeps_mask(cell_vocab):
    instance = build_instance(make_record("细胞增生", [(0, 1, "bod")]), "dis", cell_vocab)
    assert not instance.label_grid.any()
    assert int(instance.loss_mask.sum()) == 4 * 5 // 2
    assert instance.is_negative


def test_mask_covers_only_context_upper_triangle(cell_record, cell_vocab):
    instance = build_instance(cell_record, "bod", cell_vocab, pad_to=40)
    offset, n = instance.context_offset, instance.context_len
    rows, cols = np.nonzero(instance.loss_mask)
    assert rows.min() >= offset and cols.max() < offset + n
    assert np.all(rows <= cols)
    assert int(instance.loss_mask.sum()) == n * (n + 1) // 2
    assert_array_equal(instance.token_ids[offset + n + 1:], Vocab.PAD)


def test_truncated_entity_is_dropped_and_counted(cell_record, cell_vocab):
    max_len = len(query_for("dis")) + 3 + 2
    instance = build_instance(cell_record, "dis", cell_vocab, max_len=max_len)
    assert instance.context_len == 2
    assert instance.truncated_entities == 1
    assert not instance.label_grid.any()


def test_query_longer_than_budget(cell_record, cell_vocab):
    with pytest.raises(ConfigError):
        build_instance(cell_record, "dis", cell_vocab, max_len=len(query_for("dis")) + 3)


def test_build_instances_one_per_type(fixture_records):
    vocab = build_vocab(fixture_records, extra_texts=QUERIES.values())
    instances, report = build_instances(fixture_records, vocab, max_len=64)
    assert len(instances) == 9 * len(fixture_records)
    assert report.entities_dropped == 0
    assert sum(len(i.gold) for i in instances) == 43


def test_negative_sampling_thins_no_answer_instances(fixture_records):
    vocab = build_vocab(fixture_records, extra_texts=QUERIES.values())
    kept, _ = build_instances(fixture_records, vocab, max_len=64, negative_sampling=0.0,
                              rng=np.random.default_rng(0))
    assert kept and all(not i.is_negative for i in kept)


def test_negative_sampling_needs_rng(fixture_records):
    vocab = build_vocab(fixture_records)
    with pytest.raises(ConfigError):
        build_instances(fixture_records, vocab, negative_sampling=0.5)


ALPHABET = "细胞增生肺炎发热咳嗽abc1"


@st.composite
def records(draw):
    text = draw(st.text(alphabet=ALPHABET, min_size=1, max_size=30))
    spans = draw(st.lists(
        st.tuples(st.integers(0, len(text) - 1), st.integers(0, 5), st.sampled_from(ENTITY_TYPES)),
        max_size=8,
    ))
    triples = {(s, min(s + k, len(text) - 1), t) for s, k, t in spans}
    return make_record(text, sorted(triples))


@settings(max_examples=1000, deadline=None)
@given(records())
def test_gold_grid_decodes_to_gold(record):
    vocab = build_vocab([record], extra_texts=QUERIES.values())
    for entity_type in ENTITY_TYPES:
        instance = build_instance(record, entity_type, vocab)
        one_hot = np.eye(10)[instance.label_grid]
        decoded = {e.span for e in decode_grid(one_hot, instance)}
        assert decoded == {s for s in record.spans() if s[2] == entity_type}


# =============================================================================
# MLM corpus
# =============================================================================

def test_mlm_corpus_empty(cell_vocab):
    assert mlm_corpus([], cell_vocab) == []


def test_mlm_corpus_wraps_specials(cell_vocab):
    (sequence,) = mlm_corpus([SentenceRecord(text="细胞增生生")], cell_vocab)
    assert len(sequence) == 7
    assert sequence[0] == Vocab.CLS and sequence[-1] == Vocab.SEP


def test_mlm_corpus_chunks_long_text(cell_vocab):
    sequences = mlm_corpus([SentenceRecord(text="细" * 400)], cell_vocab, max_len=200)
    assert [len(s) for s in sequences] == [200, 200, 6]


# =============================================================================
# Nesting and statistics
# =============================================================================

def test_contains_requires_strictly_larger_span():
    assert contains((0, 3, "sym"), (0, 1, "bod"))
    assert not contains((0, 1, "dis"), (0, 1, "bod"))
    assert not contains((0, 1, "bod"), (0, 3, "sym"))


def test_nesting_roles_three_levels():
    inner, outer = nesting_roles([(0, 9, "sym"), (0, 5, "dis"), (0, 2, "bod")])
    assert inner == {(0, 5, "dis"), (0, 2, "bod")}
    assert outer == {(0, 9, "sym"), (0, 5, "dis")}


def test_stats_two_entity_fixture():
    stats = compute_stats([make_record("细胞增生", [(0, 3, "dis"), (0, 1, "bod")])])
    assert stats.nested == 1
    assert stats.flat == 1
    assert stats.nested_ratio == pytest.approx(50.0)


def test_identical_spans_do_not_nest():
    stats = compute_stats([make_record("细胞增生", [(0, 1, "bod"), (0, 1, "dis")])])
    assert stats.nested == 0


def test_fixture_stats(fixture_records):
    stats = compute_stats(fixture_records)
    assert stats.total == 43
    assert stats.total == sum(row.count for row in stats.per_type.values())
    assert stats.flat + stats.nested == stats.total
    assert stats.nested == 13
    assert stats.per_type["sym"].count == 9
    assert stats.per_type["bod"].count == 7
    assert stats.nested_in_sym == 4
    assert stats.inside_sym_total == 8
    assert stats.inside_sym["bod"].count == 5
    assert abs(sum(row.percent for row in stats.per_type.values()) - 100.0) < 0.1
    nested_types = {s[2] for r in fixture_records for s in nesting_roles(r.spans())[0]}
    assert len(nested_types) >= 4


def test_average_length():
    stats = compute_stats([make_record("细胞增生", [(0, 3, "dis"), (0, 1, "dis")])])
    assert stats.per_type["dis"].avg_len == pytest.approx(3.0)


def test_stats_markdown_and_comparison(fixture_records):
    first = compute_stats(fixture_records[:8])
    second = compute_stats(fixture_records)
    markdown = render_stats_markdown(second, title="fixture")
    assert "## fixture" in markdown
    assert f"| Total | {second.total} |" in markdown
    table = compare_stats(first, second, labels=("V1", "V2"))
    assert f"| {second.total - first.total:+d} |" in table.splitlines()[11]
