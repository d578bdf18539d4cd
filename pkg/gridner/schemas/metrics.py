"""
Metrics Schemas
Pydantic models for predicted entities and evaluation reports.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class PredictedEntity(BaseModel):
    """Decoded span in sentence coordinates (end inclusive)."""

    model_config = ConfigDict(frozen=True)

    start: int = Field(..., ge=0)
    end: int = Field(..., ge=0)
    type: str
    score: float = Field(..., gt=0.0, le=1.0, description="Probability of the winning class")

    @property
    def span(self):
        return self.start, self.end, self.type


class PRF(BaseModel):
    """Precision / recall / F1 with the counts they were computed from."""

    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


class MacroAverage(BaseModel):
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    absent_types: List[str] = Field(default_factory=list, description="Types with no gold and no prediction; excluded from the average")


class ConfusionMatrix(BaseModel):
    """Rows: predicted type; columns: gold type. Exact-boundary matches only."""

    labels: List[str]
    matrix: List[List[int]]


class BoundaryErrors(BaseModel):
    """Predictions and golds left out of the confusion matrix."""

    boundary_mismatch: int = 0
    unmatched_gold: int = 0
    surplus_predictions: int = 0


class RecallRow(BaseModel):
    recognized: int = 0
    total: int = 0
    recall: Optional[float] = None


class MetricsReport(BaseModel):
    """Every evaluation artifact for one prediction run."""

    micro: PRF
    macro: MacroAverage
    per_type: Dict[str, PRF]
    confusion: ConfusionMatrix
    boundary_errors: BoundaryErrors
    nested_flat: Dict[str, RecallRow]
    truncation: Dict[str, object] = Field(default_factory=dict)
    diagnostics: Dict[str, int] = Field(default_factory=dict)
    config: Optional[dict] = None
