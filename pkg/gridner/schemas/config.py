"""
Run Configuration Schemas
Pydantic models for model, training and path settings of one run.

A run is described by a single JSON document; every field has a default, and
the fully defaulted config is echoed into checkpoints and reports.
"""

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from gridner.core.exceptions import ConfigError


class ModelConfig(BaseModel):
    """Network dimensions and ablation switches."""

    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(128, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(256, ge=1)
    d_type: int = Field(32, ge=1, description="Entity-type embedding dim")
    d_lstm: int = Field(64, ge=1)
    d_biaffine: int = Field(64, ge=1, description="Dim of the start/end representations")
    d_h: int = Field(64, ge=1, description="Channel dim of the word-information grid V")
    d_E_d: int = Field(20, ge=1, description="Distance embedding dim")
    d_E_t: int = Field(20, ge=1, description="Region embedding dim")
    d_g: int = Field(64, ge=1, description="Conv output channels per dilation")
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    n_classes: Optional[int] = Field(None, ge=2)
    n_dist_buckets: int = Field(10, ge=1)
    n_region_ids: int = Field(3, ge=1)
    max_len: int = Field(200, ge=4)
    layer_norm_eps: float = Field(1e-5, gt=0.0)

    # Ablations
    use_biaffine: bool = True
    use_mlp_branch: bool = True
    use_dconv: bool = True
    use_region_emb: bool = True
    use_distance_emb: bool = True

    # "typed": C = 10 (non-entity + 9 types); "binary": C = 2 (non-entity + queried type)
    label_scheme: Literal["typed", "binary"] = "typed"
    # "mask": mean over supervised cells; "grid": divide by N^2
    loss_normalization: Literal["mask", "grid"] = "mask"

    @model_validator(mode="after")
    def check_invariants(self) -> "ModelConfig":
        if not (self.use_biaffine or self.use_mlp_branch):
            raise ValueError("At least one of use_biaffine / use_mlp_branch must be enabled")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        expected = 10 if self.label_scheme == "typed" else 2
        if self.n_classes is None:
            self.n_classes = expected
        elif self.n_classes != expected:
            raise ValueError(f"label_scheme '{self.label_scheme}' needs n_classes={expected}, got {self.n_classes}")
        return self


class TrainConfig(BaseModel):
    """Optimization and pre-training settings."""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(16, ge=1)
    lr_encoder: float = Field(2e-5, gt=0.0)
    lr_heads: float = Field(2.5e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    grad_clip_norm: Optional[float] = Field(5.0, gt=0.0)
    warmup_steps: int = Field(0, ge=0)
    epochs: int = Field(30, ge=1)
    mlm_epochs: int = Field(100, ge=1)
    mlm_mask_rate: float = Field(0.15, ge=0.0, le=1.0)
    lr_mlm: float = Field(1e-3, gt=0.0, description="Learning rate of masked-LM pre-training")
    seed: int = 13
    eval_every: int = Field(1, ge=1)
    patience: int = Field(10, ge=1)
    negative_sampling: float = Field(1.0, ge=0.0, le=1.0, description="Fraction of no-answer queries kept")
    stop_at_f1: Optional[float] = Field(None, gt=0.0, le=1.0)
    eval_on_train: bool = False


class PathsConfig(BaseModel):
    """Input files and output directories."""

    model_config = ConfigDict(extra="forbid")

    train_file: Optional[Path] = None
    dev_file: Optional[Path] = None
    test_file: Optional[Path] = None
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")
    init_checkpoint: Optional[Path] = None

    @model_validator(mode="after")
    def check_inputs_exist(self) -> "PathsConfig":
        for name in ("train_file", "dev_file", "test_file", "init_checkpoint"):
            path = getattr(self, name)
            if path is not None and not path.exists():
                raise ValueError(f"{name} does not exist: {path}")
        return self


class RunConfig(BaseModel):
    """Everything one command needs: model, training, paths, seed and precision."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: Optional[int] = None
    precision: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def sync_seed(self) -> "RunConfig":
        if self.seed is None:
            self.seed = self.train.seed
        else:
            self.train.seed = self.seed
        return self

    def echo(self) -> dict:
        """JSON-safe dump used for provenance in reports and checkpoint headers."""
        return json.loads(self.model_dump_json())


_PATH_FIELDS = ("train_file", "dev_file", "test_file", "checkpoint_dir", "report_dir", "init_checkpoint")


def load_run_config(path: Path) -> RunConfig:
    """
    Load and validate a run config file.

    Relative paths inside the "paths" section are resolved against the config
    file's directory.

    Args:
        path: JSON config file

    Returns:
        RunConfig: Fully defaulted, validated config

    Raises:
        ConfigError: If the file is missing or not valid JSON
        pydantic.ValidationError: If a value violates a constraint
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from exc

    paths = raw.get("paths") or {}
    for key in _PATH_FIELDS:
        value = paths.get(key)
        if value is not None and not Path(value).is_absolute():
            paths[key] = str((path.parent / value).resolve())
    if paths:
        raw["paths"] = paths
    return RunConfig.model_validate(raw)
