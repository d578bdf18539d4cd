"""
Corpus Service
Loading and validation of CMeEE-format data, vocabulary construction, MRC
instance building and dataset statistics.
"""

from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from gridner.core.exceptions import ConfigError, ContractError, CorpusParseError, CorpusValidationError
from gridner.repositories.corpus_repository import CorpusRepository
from gridner.schemas.corpus import (
    ENTITY_TYPES,
    TYPE_TO_ID,
    DatasetStats,
    EntityAnnotation,
    MrcInstance,
    NestedInsideRow,
    SentenceRecord,
    Span,
    TruncationReport,
    TypeStats,
    Vocab,
)
from gridner.utils.logger import get_logger


logger = get_logger("corpus")

# Entity description queries, one per type.
QUERIES: Dict[str, str] = {
    "bod": "在文本中找出身体部位，例如细胞、皮肤、抗体",
    "dep": "在文本中找出科室，例如科、室",
    "dis": "在文本中找出疾病，例如癌症、病变、炎症、增生、肿瘤",
    "dru": "在文本中找出药物，例如胶囊、疫苗、剂",
    "equ": "在文本中找出医疗设备，例如装置、器、导管",
    "ite": "在文本中找出医学检验项目，例如尿常规、血常规",
    "mic": "在文本中找出微生物，例如病毒、病原体、抗原、核糖",
    "pro": "在文本中找出医疗程序，例如心电图、病理切片、检测",
    "sym": "在文本中找出临床表现，例如疼痛、痉挛、异常",
}


class CorpusService:
    """
    Service for reading corpora from disk into validated records.
    """

    def __init__(self, repository: Optional[CorpusRepository] = None):
        self.repository = repository or CorpusRepository()

    def load_corpus(self, path: Path) -> List[SentenceRecord]:
        """
        Load, deduplicate and validate a CMeEE-format corpus.

        Character indices are Unicode code point offsets; end_idx is inclusive.

        Args:
            path: JSON corpus file

        Returns:
            List of SentenceRecord

        Raises:
            CorpusParseError: If the JSON or a record's layout is malformed
            CorpusValidationError: If any record violates an annotation invariant;
                `violations` lists every problem found, prefixed by record index
        """
        raw_records = self.repository.read_raw(path)
        records: List[SentenceRecord] = []
        violations: List[str] = []
        first_bad: Optional[int] = None

        for index, raw in enumerate(raw_records):
            record = _parse_record(raw, index)
            problems = validate(record)
            if problems:
                first_bad = index if first_bad is None else first_bad
                violations.extend(f"record {index}: {p}" for p in problems)
            records.append(record)

        if violations:
            logger.error(f"{len(violations)} annotation violation(s) in {path}")
            raise CorpusValidationError(
                f"Invalid annotation in record {first_bad} of {path}: {violations[0]}",
                record_index=first_bad,
                violations=violations,
            )

        logger.info(f"Loaded {len(records)} records from {path}")
        return records


def _parse_record(raw: dict, index: int) -> SentenceRecord:
    if "text" not in raw or not isinstance(raw["text"], str):
        raise CorpusParseError(f"Record {index} has no string 'text' field", detail={"record": index})
    try:
        entities = [EntityAnnotation.model_validate(e) for e in raw.get("entities") or []]
    except ValidationError as exc:
        raise CorpusParseError(f"Record {index} has a malformed entity: {exc.errors()[0]['msg']}",
                               detail={"record": index}) from exc

    seen = set()
    unique: List[EntityAnnotation] = []
    for entity in entities:
        if entity.span in seen:
            logger.warning(f"Record {index}: duplicate entity {entity.span} removed")
            continue
        seen.add(entity.span)
        unique.append(entity)
    return SentenceRecord(text=raw["text"], entities=unique)


def load_corpus(path: Path) -> List[SentenceRecord]:
    """Shortcut for `CorpusService().load_corpus(path)`."""
    return CorpusService().load_corpus(path)


def validate(record: SentenceRecord) -> List[str]:
    """
    Check index bounds, surface match and entity types.

    Returns:
        List of violation messages; empty means valid
    """
    violations: List[str] = []
    length = len(record.text)
    for k, entity in enumerate(record.entities):
        label = f"entity {k} ({entity.start_idx}, {entity.end_idx}, {entity.type!r})"
        if entity.type not in TYPE_TO_ID:
            violations.append(f"{label}: unknown type {entity.type!r}")
        if not 0 <= entity.start_idx <= entity.end_idx < length:
            violations.append(f"{label}: index out of bounds for text of length {length}")
            continue
        actual = record.text[entity.start_idx: entity.end_idx + 1]
        if actual != entity.surface:
            violations.append(f"{label}: surface {entity.surface!r} does not match text slice {actual!r}")
    return violations


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

def build_vocab(records: Sequence[SentenceRecord], min_freq: int = 1,
                extra_texts: Iterable[str] = ()) -> Vocab:
    """
    Build a character vocabulary.

    Specials take ids 0-4; remaining characters are ordered by frequency
    (descending), ties broken by code point (ascending).

    Args:
        records: Corpus records
        min_freq: Characters seen fewer times map to <unk>
        extra_texts: Additional texts counted alongside the corpus (e.g. queries)

    Returns:
        Vocab: Deterministic vocabulary
    """
    if not records:
        raise ContractError("Cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for record in records:
        counts.update(record.text)
    for text in extra_texts:
        counts.update(text)
    ordered = sorted((ch for ch, n in counts.items() if n >= min_freq), key=lambda ch: (-counts[ch], ord(ch)))
    return Vocab(list(Vocab.SPECIALS) + [ch for ch in ordered if ch not in Vocab.SPECIALS])


# ---------------------------------------------------------------------------
# MRC instances
# ---------------------------------------------------------------------------

def query_for(entity_type: str) -> str:
    """Entity description query for one of the nine types."""
    if entity_type not in QUERIES:
        raise ConfigError(f"Unknown entity type {entity_type!r}. Allowed: {', '.join(ENTITY_TYPES)}")
    return QUERIES[entity_type]


def target_class(type_id: int, label_scheme: str = "typed") -> int:
    """Grid class id that marks an answer span of the queried type."""
    return 1 if label_scheme == "binary" else 1 + type_id


def build_instance(
    record: SentenceRecord,
    entity_type: str,
    vocab: Vocab,
    max_len: int = 200,
    pad_to: Optional[int] = None,
    label_scheme: str = "typed",
    record_index: Optional[int] = None,
) -> MrcInstance:
    """
    Build the (query, context) instance of one record for one entity type.

    Args:
        record: Annotated sentence
        entity_type: Queried type
        vocab: Character vocabulary
        max_len: Maximum token count including specials
        pad_to: Pad token_ids with <pad> up to this length
        label_scheme: "typed" (class 1 + type id) or "binary" (class 1)
        record_index: Position of the record in its corpus, kept for reporting

    Returns:
        MrcInstance: Tokens, label grid and loss mask; entities crossing the
        context window are dropped and counted in `truncated_entities`
    """
    query = query_for(entity_type)
    budget = max_len - len(query) - 3
    if budget < 1:
        raise ConfigError(f"max_len={max_len} leaves no room for context after the {entity_type!r} query")
    if pad_to is not None and pad_to > max_len:
        raise ConfigError(f"pad_to={pad_to} exceeds max_len={max_len}")

    type_id = TYPE_TO_ID[entity_type]
    context = record.text[:budget]
    offset = len(query) + 2
    token_ids = [Vocab.CLS] + vocab.encode(query) + [Vocab.SEP] + vocab.encode(context) + [Vocab.SEP]
    if pad_to is not None and pad_to > len(token_ids):
        token_ids += [Vocab.PAD] * (pad_to - len(token_ids))
    n = len(token_ids)

    loss_mask = np.zeros((n, n), dtype=bool)
    window = slice(offset, offset + len(context))
    loss_mask[window, window] = np.triu(np.ones((len(context), len(context)), dtype=bool))

    label_grid = np.zeros((n, n), dtype=np.int64)
    label = target_class(type_id, label_scheme)
    gold: List[Span] = []
    dropped = 0
    for entity in record.entities:
        if entity.type != entity_type:
            continue
        if entity.end_idx >= len(context):
            dropped += 1
            continue
        label_grid[offset + entity.start_idx, offset + entity.end_idx] = label
        gold.append(entity.span)

    return MrcInstance(
        type_id=type_id,
        token_ids=np.asarray(token_ids, dtype=np.int64),
        context_offset=offset,
        context_len=len(context),
        label_grid=label_grid,
        loss_mask=loss_mask,
        gold=tuple(sorted(gold)),
        truncated_entities=dropped,
        record_index=record_index,
    )


def build_instances(
    records: Sequence[SentenceRecord],
    vocab: Vocab,
    max_len: int = 200,
    label_scheme: str = "typed",
    negative_sampling: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[List[MrcInstance], TruncationReport]:
    """
    Build one instance per (record, type), optionally thinning no-answer instances.

    Records with empty text produce no instances (nothing to supervise).

    Args:
        records: Corpus records
        vocab: Character vocabulary
        max_len: Maximum token count
        label_scheme: Grid label scheme
        negative_sampling: Probability of keeping an instance with no gold span
        rng: Random source for negative sampling (required when the rate is below 1)

    Returns:
        Tuple of (instances, truncation report)
    """
    if negative_sampling < 1.0 and rng is None:
        raise ConfigError("negative_sampling below 1.0 needs a random generator")
    instances: List[MrcInstance] = []
    report = TruncationReport()
    for index, record in enumerate(records):
        if not record.text:
            continue
        for entity_type in ENTITY_TYPES:
            instance = build_instance(record, entity_type, vocab, max_len=max_len,
                                      label_scheme=label_scheme, record_index=index)
            report.add(instance)
            if instance.is_negative and negative_sampling < 1.0 and rng.random() >= negative_sampling:
                continue
            instances.append(instance)
    if report.entities_dropped:
        logger.warning(f"{report.entities_dropped} entities dropped by context truncation (max_len={max_len})")
    return instances, report


def mlm_corpus(records: Sequence[SentenceRecord], vocab: Vocab, max_len: int = 200) -> List[List[int]]:
    """
    Character token sequences for masked-LM pre-training.

    Each text is chunked into payloads of max_len - 2 characters and wrapped in
    <cls> ... <sep>.
    """
    payload = max_len - 2
    if payload < 1:
        raise ConfigError(f"max_len={max_len} is too small for MLM sequences")
    sequences: List[List[int]] = []
    for record in records:
        ids = vocab.encode(record.text)
        for start in range(0, len(ids), payload):
            sequences.append([Vocab.CLS] + ids[start: start + payload] + [Vocab.SEP])
    return sequences


# ---------------------------------------------------------------------------
# Nesting and statistics
# ---------------------------------------------------------------------------

def contains(outer: Span, inner: Span) -> bool:
    """True if `outer` strictly contains `inner`: covers it and is strictly longer."""
    return (
        outer[0] <= inner[0]
        and inner[1] <= outer[1]
        and (outer[1] - outer[0]) > (inner[1] - inner[0])
    )


def nesting_roles(spans: Sequence[Span]) -> Tuple[set, set]:
    """
    Split spans of one sentence into nesting roles.

    Returns:
        Tuple of (inner, outer): spans contained in another span, and spans
        containing another span. A span may be in both (three-level nests).
    """
    unique = list(dict.fromkeys(spans))
    inner, outer = set(), set()
    for a in unique:
        for b in unique:
            if contains(a, b):
                outer.add(a)
                inner.add(b)
    return inner, outer


def compute_stats(records: Sequence[SentenceRecord]) -> DatasetStats:
    """
    Entity statistics per type, flat/nested split and the breakdown of entities
    nested inside sym.

    A nested entity is one strictly contained in a different, strictly larger
    span; identical spans with different types do not nest each other.
    `nested_in_sym` counts sym entities that contain at least one other entity.
    """
    counts: Counter = Counter()
    lengths: Counter = Counter()
    nested = 0
    sym_containers = 0
    inside_sym: Counter = Counter()

    for record in records:
        spans = record.spans()
        inner, outer = nesting_roles(spans)
        nested += len(inner)
        sym_spans = [s for s in spans if s[2] == "sym"]
        sym_containers += sum(1 for s in sym_spans if s in outer)
        for span in spans:
            counts[span[2]] += 1
            lengths[span[2]] += span[1] - span[0] + 1
            if any(contains(s, span) for s in sym_spans):
                inside_sym[span[2]] += 1

    total = sum(counts.values())
    per_type = {
        t: TypeStats(
            count=counts[t],
            percent=_percent(counts[t], total),
            avg_len=round(lengths[t] / counts[t], 4) if counts[t] else 0.0,
        )
        for t in ENTITY_TYPES
    }
    inside_total = sum(inside_sym.values())
    return DatasetStats(
        records=len(records),
        per_type=per_type,
        total=total,
        avg_len=round(sum(lengths.values()) / total, 4) if total else 0.0,
        flat=total - nested,
        nested=nested,
        nested_ratio=_percent(nested, total),
        nested_in_sym=sym_containers,
        nested_in_sym_ratio=_percent(sym_containers, counts["sym"]),
        inside_sym={t: NestedInsideRow(count=inside_sym[t], percent=_percent(inside_sym[t], inside_total))
                    for t in ENTITY_TYPES},
        inside_sym_total=inside_total,
    )


def _percent(part: int, whole: int) -> float:
    return round(100.0 * part / whole, 4) if whole else 0.0


def render_stats_markdown(stats: DatasetStats, title: str = "Corpus") -> str:
    """Markdown tables: entities per type, nesting summary, entities nested inside sym."""
    lines = [f"## {title}", "", "| Entity | #Entity | Per/% | Avg.len |", "|---|---:|---:|---:|"]
    ordered = sorted(ENTITY_TYPES, key=lambda t: -stats.per_type[t].count)
    for t in ordered:
        row = stats.per_type[t]
        lines.append(f"| {t} | {row.count} | {row.percent:.2f} | {row.avg_len:.2f} |")
    lines.append(f"| Total | {stats.total} | {100 if stats.total else 0} | {stats.avg_len:.2f} |")
    lines += [
        "",
        "| Entity | Count |",
        "|---|---:|",
        f"| #Flat | {stats.flat} |",
        f"| #Nested | {stats.nested} |",
        f"| Nested/% | {stats.nested_ratio:.2f} |",
        f"| #Nested in sym | {stats.nested_in_sym} |",
        f"| Nested in sym/% | {stats.nested_in_sym_ratio:.2f} |",
        "",
        "| Nested inside sym | #Nested | Per/% |",
        "|---|---:|---:|",
    ]
    for t in sorted(ENTITY_TYPES, key=lambda t: -stats.inside_sym[t].count):
        row = stats.inside_sym[t]
        lines.append(f"| {t} | {row.count} | {row.percent:.2f} |")
    lines.append(f"| Total | {stats.inside_sym_total} | {100 if stats.inside_sym_total else 0} |")
    return "\n".join(lines) + "\n"


def compare_stats(first: DatasetStats, second: DatasetStats,
                  labels: Tuple[str, str] = ("A", "B")) -> str:
    """Side-by-side markdown of two corpus revisions with per-type count deltas."""
    a, b = labels
    lines = [
        f"| Entity | #{a} | Per/% {a} | Avg.len {a} | #{b} | Per/% {b} | Avg.len {b} | Δ# |",
        "|---|---:|---:|---:|---:|---:|---:|---:|",
    ]
    for t in ENTITY_TYPES:
        x, y = first.per_type[t], second.per_type[t]
        lines.append(
            f"| {t} | {x.count} | {x.percent:.2f} | {x.avg_len:.2f} "
            f"| {y.count} | {y.percent:.2f} | {y.avg_len:.2f} | {y.count - x.count:+d} |"
        )
    lines.append(
        f"| Total | {first.total} | 100 | {first.avg_len:.2f} "
        f"| {second.total} | 100 | {second.avg_len:.2f} | {second.total - first.total:+d} |"
    )
    lines += [
        "",
        f"| Nesting | {a} | {b} |",
        "|---|---:|---:|",
        f"| #Flat | {first.flat} | {second.flat} |",
        f"| #Nested | {first.nested} | {second.nested} |",
        f"| Nested/% | {first.nested_ratio:.2f} | {second.nested_ratio:.2f} |",
        f"| #Nested in sym | {first.nested_in_sym} | {second.nested_in_sym} |",
        f"| Nested in sym/% | {first.nested_in_sym_ratio:.2f} | {second.nested_in_sym_ratio:.2f} |",
    ]
    return "\n".join(lines) + "\n"
