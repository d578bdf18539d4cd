"""
Checkpoint Schemas
Header metadata stored with every checkpoint and the in-memory checkpoint.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field


class CheckpointMeta(BaseModel):
    """JSON header of a checkpoint (besides the layout fields the repository adds)."""

    kind: Literal["mlm", "finetune"]
    step: int = Field(0, ge=0)
    epoch: int = Field(0, ge=0)
    dev_f1: Optional[float] = Field(None, description="F1 the checkpoint was selected by")
    vocab: List[str]
    vocab_hash: str
    config: dict


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    tensors: "OrderedDict[str, np.ndarray]"
