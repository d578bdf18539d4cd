"""
Prediction Service
Decoding of co-prediction grids into entities and sentence-level inference
over all nine entity-type queries.
"""

from collections import Counter, defaultdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from gridner.core.exceptions import ContractError
from gridner.diffcore import Tensor, no_record
from gridner.models.network import forward
from gridner.models.params import ModelParams
from gridner.schemas.config import ModelConfig
from gridner.schemas.corpus import ENTITY_TYPES, MrcInstance, SentenceRecord, Span, TruncationReport, Vocab
from gridner.schemas.metrics import PredictedEntity
from gridner.services.corpus_service import build_instance, nesting_roles, target_class


def decode_grid(
    probs,
    instance: MrcInstance,
    label_scheme: str = "typed",
    diagnostics: Optional[Counter] = None,
) -> List[PredictedEntity]:
    """
    Extract the answer spans of an instance's query from its probability grid.

    Every unmasked cell whose argmax class (ties to the lowest index) is the
    queried type's class becomes an entity; cells won by another entity class
    are dropped and tallied under "non_queried_class".

    Args:
        probs: [N, N, C] probabilities as a Tensor or array
        instance: Instance the grid was computed for
        label_scheme: Scheme the model was trained with
        diagnostics: Optional counter updated in place

    Returns:
        List of PredictedEntity in sentence offsets, sorted by (start, end)
    """
    grid = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if grid.ndim != 3 or grid.shape[:2] != instance.label_grid.shape:
        raise ContractError(f"Probability grid {grid.shape} does not match instance grid {instance.label_grid.shape}")

    winners = np.argmax(grid, axis=-1)
    target = target_class(instance.type_id, label_scheme)
    live = instance.loss_mask
    if diagnostics is not None:
        diagnostics["non_queried_class"] += int(np.sum(live & (winners != 0) & (winners != target)))

    entities: Dict[Span, PredictedEntity] = {}
    offset = instance.context_offset
    for i, j in zip(*np.nonzero(live & (winners == target))):
        score = min(float(grid[i, j, target]), 1.0)
        entity = PredictedEntity(start=int(i) - offset, end=int(j) - offset, type=instance.type, score=score)
        if entity.span not in entities or entities[entity.span].score < score:
            entities[entity.span] = entity
    return sorted(entities.values(), key=lambda e: (e.start, e.end))


def merge_predictions(groups: Iterable[Sequence[PredictedEntity]]) -> List[PredictedEntity]:
    """Union of entity lists; identical (start, end, type) triples keep the highest score."""
    best: Dict[Span, PredictedEntity] = {}
    for group in groups:
        for entity in group:
            if entity.span not in best or best[entity.span].score < entity.score:
                best[entity.span] = entity
    return [best[span] for span in sorted(best, key=lambda s: (s[0], s[1], ENTITY_TYPES.index(s[2])))]


def predict(
    record: SentenceRecord,
    params: ModelParams,
    vocab: Vocab,
    config: ModelConfig,
    truncation: Optional[TruncationReport] = None,
    diagnostics: Optional[Counter] = None,
    record_index: Optional[int] = None,
) -> List[PredictedEntity]:
    """
    Run all nine type queries on one sentence and union the decoded entities.

    Only the context window that fits max_len is searched; entities beyond it
    are counted in `truncation` when given.

    Args:
        record: Sentence (its entities are only used for truncation accounting)
        params: Trained parameters
        vocab: Vocabulary the parameters were trained with
        config: Model configuration
        truncation: Optional report updated in place
        diagnostics: Optional decode counter updated in place
        record_index: Record position, for reporting

    Returns:
        List of PredictedEntity
    """
    if not record.text:
        return []
    per_query = []
    with no_record():
        for entity_type in ENTITY_TYPES:
            instance = build_instance(record, entity_type, vocab, max_len=config.max_len,
                                      label_scheme=config.label_scheme, record_index=record_index)
            if truncation is not None:
                truncation.add(instance)
            grid = forward(instance, params, config, train_mode=False)
            per_query.append(decode_grid(grid.probs, instance, config.label_scheme, diagnostics))
    return merge_predictions(per_query)


def predict_corpus(
    records: Sequence[SentenceRecord],
    params: ModelParams,
    vocab: Vocab,
    config: ModelConfig,
) -> Tuple[List[List[PredictedEntity]], TruncationReport, Counter]:
    """
    Predict every record of a corpus.

    Returns:
        Tuple of (predictions per record, truncation report, decode diagnostics)
    """
    truncation = TruncationReport()
    diagnostics: Counter = Counter()
    predictions = [
        predict(record, params, vocab, config, truncation, diagnostics, record_index=index)
        for index, record in enumerate(records)
    ]
    return predictions, truncation, diagnostics


def _as_span(entity) -> Span:
    if isinstance(entity, tuple):
        return entity
    return entity.span


def render_case(text: str, entities: Iterable) -> str:
    """
    Inline bracket rendering of entities for case studies.

    Entities containing another entity are wrapped in curly braces, all others
    in square brackets, each followed by its type:
    "{[结核菌素]mic[皮试]pro阳性}sym".

    Args:
        text: Sentence
        entities: PredictedEntity, EntityAnnotation or (start, end, type) triples

    Returns:
        str: Annotated sentence
    """
    spans = sorted({_as_span(e) for e in entities}, key=lambda s: (s[0], -s[1], s[2]))
    _, outer = nesting_roles(spans)
    opens: Dict[int, List[Span]] = defaultdict(list)
    closes: Dict[int, List[Span]] = defaultdict(list)
    for span in spans:
        opens[span[0]].append(span)
        closes[span[1]].append(span)

    pieces = []
    for k, char in enumerate(text):
        pieces.extend("{" if span in outer else "[" for span in opens.get(k, ()))
        pieces.append(char)
        # Innermost (latest-starting) spans close first.
        for span in sorted(closes.get(k, ()), key=lambda s: (-s[0], s[2])):
            pieces.append(("}" if span in outer else "]") + span[2])
    return "".join(pieces)
