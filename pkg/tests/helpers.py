"""Record builders and model stand-ins shared by the test modules."""

import json
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from gridner.diffcore import Tensor
from gridner.models.network import ScoreGrid
from gridner.schemas.corpus import EntityAnnotation, SentenceRecord


def make_record(text: str, entities: Sequence[Tuple[int, int, str]] = ()) -> SentenceRecord:
    """Record whose entity surfaces are sliced from the text."""
    return SentenceRecord(
        text=text,
        entities=[
            EntityAnnotation(start_idx=s, end_idx=e, type=t, entity=text[s: e + 1])
            for s, e, t in entities
        ],
    )


def write_corpus(path: Path, records: Sequence[SentenceRecord]) -> Path:
    payload = [
        {"text": r.text, "entities": [e.model_dump(by_alias=True) for e in r.entities]}
        for r in records
    ]
    path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
    return path


def oracle_forward(instance, params, config, train_mode=False, rng=None):
    """Stand-in for the model's forward pass that returns the one-hot gold grid."""
    probs = Tensor(np.eye(config.n_classes)[instance.label_grid])
    return ScoreGrid(None, None, probs)
