"""
Evaluation Service
Exact-match span metrics: micro and per-type P/R/F1, confusion matrix,
nested/flat recall breakdown, and report rendering.
"""

import json
from collections import Counter, defaultdict
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from gridner.core.exceptions import ConfigError, ContractError
from gridner.schemas.corpus import ENTITY_TYPES, SentenceRecord, Span
from gridner.schemas.metrics import (
    PRF,
    BoundaryErrors,
    ConfusionMatrix,
    MacroAverage,
    MetricsReport,
    RecallRow,
)
from gridner.services.corpus_service import nesting_roles

# (record index, start, end, type)
Triple = Tuple[int, int, int, str]

NESTED_FLAT_ROWS = ("All", "Flat", "Nested", "Inner", "Outer")


def _span(entity) -> Span:
    return entity if isinstance(entity, tuple) else entity.span


def _triples(per_record: Sequence[Iterable]) -> Set[Triple]:
    return {(index,) + _span(e) for index, entities in enumerate(per_record) for e in entities}


def _check_aligned(predictions: Sequence, golds: Sequence) -> None:
    if len(predictions) != len(golds):
        raise ContractError(f"Predictions cover {len(predictions)} records but golds cover {len(golds)}")


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def prf(tp: int, fp: int, fn: int) -> PRF:
    """P/R/F1 from counts, with 0 for empty denominators."""
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return PRF(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)


def micro_metrics(predictions: Sequence[Iterable], golds: Sequence[Iterable]) -> PRF:
    """
    Corpus-level exact (start, end, type) matching.

    Args:
        predictions: Per record, entities or (start, end, type) triples
        golds: Per record, gold entities aligned with predictions

    Returns:
        PRF: Pooled precision, recall, F1 and counts
    """
    _check_aligned(predictions, golds)
    pred, gold = _triples(predictions), _triples(golds)
    tp = len(pred & gold)
    return prf(tp, len(pred) - tp, len(gold) - tp)


def per_type_report(predictions: Sequence[Iterable],
                    golds: Sequence[Iterable]) -> Tuple[Dict[str, PRF], MacroAverage]:
    """
    Micro metrics restricted to each entity type, plus their unweighted mean.

    The macro average runs over the types that occur in gold or predictions;
    types absent from both keep an all-zero row and are listed in
    `absent_types`.

    Returns:
        Tuple of (type -> PRF for all nine types, macro average)
    """
    _check_aligned(predictions, golds)
    pred, gold = _triples(predictions), _triples(golds)
    rows: Dict[str, PRF] = {}
    present, absent = [], []
    for entity_type in ENTITY_TYPES:
        p = {t for t in pred if t[3] == entity_type}
        g = {t for t in gold if t[3] == entity_type}
        tp = len(p & g)
        rows[entity_type] = prf(tp, len(p) - tp, len(g) - tp)
        (present if p or g else absent).append(entity_type)

    macro = MacroAverage(
        precision=_safe_div(sum(rows[t].precision for t in present), len(present)),
        recall=_safe_div(sum(rows[t].recall for t in present), len(present)),
        f1=_safe_div(sum(rows[t].f1 for t in present), len(present)),
        absent_types=absent,
    )
    return rows, macro


def confusion_matrix(predictions: Sequence[Iterable],
                     golds: Sequence[Iterable]) -> Tuple[ConfusionMatrix, BoundaryErrors]:
    """
    Type confusions among exact-boundary matches.

    Each gold entity is matched at most once: at a shared (start, end), same-type
    pairs match first, then the remaining predictions and golds pair up in type
    order. Rows are predicted types, columns gold types.

    Returns:
        Tuple of (9x9 matrix, boundary error counts)
    """
    _check_aligned(predictions, golds)
    index = {t: k for k, t in enumerate(ENTITY_TYPES)}
    matrix = [[0] * len(ENTITY_TYPES) for _ in ENTITY_TYPES]
    errors = BoundaryErrors()

    for pred_entities, gold_entities in zip(predictions, golds):
        pred_at: Dict[Tuple[int, int], Set[str]] = defaultdict(set)
        gold_at: Dict[Tuple[int, int], Set[str]] = defaultdict(set)
        for start, end, entity_type in map(_span, pred_entities):
            pred_at[(start, end)].add(entity_type)
        for start, end, entity_type in map(_span, gold_entities):
            gold_at[(start, end)].add(entity_type)

        for boundary, pred_types in pred_at.items():
            gold_types = gold_at.get(boundary, set())
            if not gold_types:
                errors.boundary_mismatch += len(pred_types)
                continue
            same = pred_types & gold_types
            for entity_type in same:
                matrix[index[entity_type]][index[entity_type]] += 1
            rest_pred = sorted(pred_types - same, key=index.get)
            rest_gold = sorted(gold_types - same, key=index.get)
            for p, g in zip(rest_pred, rest_gold):
                matrix[index[p]][index[g]] += 1
            errors.surplus_predictions += max(0, len(rest_pred) - len(rest_gold))
        errors.unmatched_gold += sum(len(types) for b, types in gold_at.items() if b not in pred_at)

    return ConfusionMatrix(labels=list(ENTITY_TYPES), matrix=matrix), errors


def nested_flat_report(predictions: Sequence[Iterable], golds: Sequence[Iterable]) -> Dict[str, RecallRow]:
    """
    Exact-match recall on gold subsets: All, Flat, Nested, Inner, Outer.

    Inner entities are contained in another gold entity of the same sentence,
    Outer entities contain one; an entity can be both. Nested is their union
    and Flat everything else. Rows with no gold entities have recall None.
    """
    _check_aligned(predictions, golds)
    found = _triples(predictions)
    subsets: Dict[str, Set[Triple]] = {row: set() for row in NESTED_FLAT_ROWS}
    for index, gold_entities in enumerate(golds):
        spans = [_span(e) for e in gold_entities]
        inner, outer = nesting_roles(spans)
        for span in spans:
            triple = (index,) + span
            subsets["All"].add(triple)
            if span in inner:
                subsets["Inner"].add(triple)
            if span in outer:
                subsets["Outer"].add(triple)
            if span in inner or span in outer:
                subsets["Nested"].add(triple)
            else:
                subsets["Flat"].add(triple)

    report = {}
    for row, members in subsets.items():
        hits = len(members & found)
        report[row] = RecallRow(recognized=hits, total=len(members),
                                recall=hits / len(members) if members else None)
    return report


def build_report(
    predictions: Sequence[Iterable],
    golds: Sequence[Iterable],
    truncation: Optional[dict] = None,
    diagnostics: Optional[Counter] = None,
    config: Optional[dict] = None,
) -> MetricsReport:
    """Every evaluation artifact for one prediction run."""
    per_type, macro = per_type_report(predictions, golds)
    confusion, boundary = confusion_matrix(predictions, golds)
    return MetricsReport(
        micro=micro_metrics(predictions, golds),
        macro=macro,
        per_type=per_type,
        confusion=confusion,
        boundary_errors=boundary,
        nested_flat=nested_flat_report(predictions, golds),
        truncation=truncation or {},
        diagnostics=dict(sorted((diagnostics or {}).items())),
        config=config,
    )


def gold_spans(records: Sequence[SentenceRecord]) -> List[List[Span]]:
    return [record.spans() for record in records]


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def render_report(report: MetricsReport, fmt: str = "json") -> str:
    """
    Serialize a report.

    Args:
        report: Metrics report
        fmt: "json" (stable field names, sorted keys) or "markdown"
            (per-type and nested/flat tables, percentages to two decimals)

    Returns:
        str: Rendered report
    """
    if fmt == "json":
        return json.dumps(report.model_dump(mode="json"), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
    if fmt != "markdown":
        raise ConfigError(f"Unknown report format '{fmt}'. Allowed: json, markdown")

    lines = ["## Results by entity type", "", "| Entity | P | R | F1 | TP | FP | FN |", "|---|---:|---:|---:|---:|---:|---:|"]
    for entity_type in ENTITY_TYPES:
        row = report.per_type[entity_type]
        mark = "*" if entity_type in report.macro.absent_types else ""
        lines.append(f"| {entity_type}{mark} | {_pct(row.precision)} | {_pct(row.recall)} | {_pct(row.f1)} "
                     f"| {row.tp} | {row.fp} | {row.fn} |")
    macro, micro = report.macro, report.micro
    lines.append(f"| Mac-Avg | {_pct(macro.precision)} | {_pct(macro.recall)} | {_pct(macro.f1)} | | | |")
    lines.append(f"| Micro | {_pct(micro.precision)} | {_pct(micro.recall)} | {_pct(micro.f1)} "
                 f"| {micro.tp} | {micro.fp} | {micro.fn} |")
    if macro.absent_types:
        lines += ["", f"\\* absent from gold and predictions, excluded from Mac-Avg: {', '.join(macro.absent_types)}"]

    lines += ["", "## Nested and flat entities", "", "| Entity | #Gold | #Recognized | Recall/% |", "|---|---:|---:|---:|"]
    for name in NESTED_FLAT_ROWS:
        row = report.nested_flat[name]
        lines.append(f"| {name} | {row.total} | {row.recognized} | {_pct(row.recall)} |")

    labels = report.confusion.labels
    lines += ["", "## Confusion matrix (rows: predicted, columns: gold)", "",
              "| | " + " | ".join(labels) + " |", "|---|" + "---:|" * len(labels)]
    for label, counts in zip(labels, report.confusion.matrix):
        lines.append(f"| {label} | " + " | ".join(str(c) for c in counts) + " |")

    boundary = report.boundary_errors
    lines += [
        "",
        "## Boundary errors",
        "",
        f"- predictions with no gold span at their boundaries: {boundary.boundary_mismatch}",
        f"- gold spans with no prediction at their boundaries: {boundary.unmatched_gold}",
        f"- extra predictions at matched boundaries: {boundary.surplus_predictions}",
    ]
    if report.truncation:
        lines.append(f"- entities beyond the context window: {report.truncation.get('entities_dropped', 0)}")
    for key, value in report.diagnostics.items():
        lines.append(f"- {key}: {value}")
    return "\n".join(lines) + "\n"
