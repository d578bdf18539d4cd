"""
Corpus Schemas
Pydantic models for annotated sentences and dataset statistics, plus the
MRC training instance and the character vocabulary.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


# Type ids 0-8 follow this order; grid class id = 1 + type id.
ENTITY_TYPES: Tuple[str, ...] = ("bod", "dis", "sym", "pro", "equ", "dru", "ite", "dep", "mic")
TYPE_TO_ID: Dict[str, int] = {t: i for i, t in enumerate(ENTITY_TYPES)}

Span = Tuple[int, int, str]


class EntityAnnotation(BaseModel):
    """One typed, character-indexed span (end inclusive)."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    start_idx: int
    end_idx: int
    type: str
    surface: str = Field(..., alias="entity")

    @property
    def span(self) -> Span:
        return self.start_idx, self.end_idx, self.type

    @property
    def length(self) -> int:
        return self.end_idx - self.start_idx + 1


class SentenceRecord(BaseModel):
    """One text with possibly nested and overlapping entity annotations."""

    model_config = ConfigDict(frozen=True)

    text: str
    entities: List[EntityAnnotation] = Field(default_factory=list)

    def spans(self) -> List[Span]:
        return [e.span for e in self.entities]


class TypeStats(BaseModel):
    count: int = 0
    percent: float = 0.0
    avg_len: float = 0.0


class NestedInsideRow(BaseModel):
    count: int = 0
    percent: float = 0.0


class DatasetStats(BaseModel):
    """Entity counts, nesting analysis and the breakdown of entities nested inside sym."""

    records: int = 0
    per_type: Dict[str, TypeStats] = Field(default_factory=dict)
    total: int = 0
    avg_len: float = 0.0
    flat: int = 0
    nested: int = 0
    nested_ratio: float = 0.0
    nested_in_sym: int = 0
    nested_in_sym_ratio: float = 0.0
    inside_sym: Dict[str, NestedInsideRow] = Field(default_factory=dict)
    inside_sym_total: int = 0


class Vocab:
    """
    Character vocabulary with reserved special ids.

    Args:
        tokens: Token strings in id order; must start with the specials
    """

    PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
    SPECIALS: Tuple[str, ...] = ("<pad>", "<unk>", "<cls>", "<sep>", "<mask>")

    def __init__(self, tokens: List[str]):
        if tuple(tokens[: len(self.SPECIALS)]) != self.SPECIALS:
            raise ValueError("Vocabulary must start with the reserved special tokens")
        self.tokens: List[str] = list(tokens)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.UNK)

    def encode(self, text: str) -> List[int]:
        return [self.id_of(ch) for ch in text]

    @property
    def n_specials(self) -> int:
        return len(self.SPECIALS)

    def fingerprint(self) -> str:
        return hashlib.sha256("\u0000".join(self.tokens).encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens


@dataclass(frozen=True)
class MrcInstance:
    """
    One (query, context) sample.

    token_ids layout: [<cls>, query..., <sep>, context..., <sep>, <pad>...].
    label_grid[i, j] is the class of the span starting at token i and ending at
    token j; loss_mask marks the context upper triangle.
    """

    type_id: int
    token_ids: np.ndarray
    context_offset: int
    context_len: int
    label_grid: np.ndarray
    loss_mask: np.ndarray
    gold: Tuple[Span, ...] = ()
    truncated_entities: int = 0
    record_index: Optional[int] = None

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def type(self) -> str:
        return ENTITY_TYPES[self.type_id]

    @property
    def is_negative(self) -> bool:
        return not self.gold


@dataclass
class TruncationReport:
    """Entities lost because they cross the context window boundary."""

    instances: int = 0
    entities_dropped: int = 0
    by_type: Dict[str, int] = field(default_factory=dict)

    def add(self, instance: MrcInstance) -> None:
        if instance.truncated_entities:
            self.instances += 1
            self.entities_dropped += instance.truncated_entities
            self.by_type[instance.type] = self.by_type.get(instance.type, 0) + instance.truncated_entities

    def as_dict(self) -> dict:
        return {
            "instances": self.instances,
            "entities_dropped": self.entities_dropped,
            "by_type": dict(sorted(self.by_type.items())),
        }
