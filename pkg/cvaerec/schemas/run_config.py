"""
Run configuration schema.

A run is described by one JSON file validated against ``RunConfig``. CLI flags
are merged on top with ``apply_overrides``; flags win.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator

from cvaerec.config import settings
from cvaerec.core.exceptions import ConfigError

logger = logging.getLogger(__name__)


class DatasetConfig(BaseModel):
    name: str = Field("custom", description="Dataset label recorded in manifests")
    ratings_path: Optional[str] = Field(None, description="Delimited ratings file: user_id, item_id, rating, [timestamp]")
    categories_path: Optional[str] = Field(None, description="Delimited item file: item_id, ..., pipe-separated labels")
    delimiter: str = Field(",", min_length=1, description="Ratings file delimiter")
    category_delimiter: str = Field(",", min_length=1, description="Item-category file delimiter")
    rating_threshold: float = Field(3.0, description="Ratings >= threshold become implicit positives")
    drop_categories: List[str] = Field(default_factory=list, description="Category labels removed at load time")
    keep_top_categories: Optional[int] = Field(None, ge=1, description="Keep only the most populated categories")


class SplitSpec(BaseModel):
    n_heldout_val: int = Field(100, ge=0, description="Validation users")
    n_heldout_test: int = Field(100, ge=0, description="Test users")
    foldin_fraction: float = Field(0.8, gt=0.0, lt=1.0, description="Share of a held-out user's items fed to the model")
    min_user_interactions: int = Field(4, ge=1, description="Users with fewer items are removed")
    min_item_interactions: int = Field(10, ge=1, description="Items with fewer users are removed")
    seed: int = Field(98765, description="Split seed")


class ModelConfig(BaseModel):
    hidden_dim: int = Field(600, ge=1)
    latent_dim: int = Field(200, ge=1)
    dropout_p: float = Field(0.5, ge=0.0, lt=1.0)
    normalize_before_dropout: bool = Field(True, description="L2-normalize the rating vector before dropout")
    dtype: Literal["float64", "float32"] = "float64"


class TrainConfig(BaseModel):
    batch_size: int = Field(500, ge=1)
    max_epochs: int = Field(100, ge=1)
    lr: float = Field(0.001, gt=0.0)
    anneal_cap: float = Field(1.0, ge=0.0, le=1.0)
    anneal_total_steps: Optional[int] = Field(None, ge=1, description="Defaults to max_epochs x batches per epoch")
    patience: int = Field(5, ge=1)
    seed: int = Field(12345)
    validation_protocol: Literal["conditioned", "total", "normal"] = "conditioned"
    validation_k: int = Field(100, ge=1)
    threads: int = Field(0, ge=0, description="0 = deterministic single-threaded reference")


class EvalProtocol(BaseModel):
    kind: Literal["total", "normal", "conditioned"] = "total"
    ks_recall: List[int] = Field(default_factory=lambda: [20, 50])
    ks_ndcg: List[int] = Field(default_factory=lambda: [100])

    @field_validator("ks_recall", "ks_ndcg")
    @classmethod
    def _cutoffs_positive(cls, value: List[int]) -> List[int]:
        if any(k < 1 for k in value):
            raise ValueError("cutoffs must be >= 1")
        return value


class AnalysisConfig(BaseModel):
    max_rank: int = Field(100, ge=1)
    purity_k: int = Field(100, ge=1)
    n_latent_users: int = Field(2000, ge=1)
    pca_components: int = Field(5, ge=1)
    pairs: List[Tuple[int, int]] = Field(default_factory=lambda: [(2, 5), (3, 5)])
    neutral_categories: List[str] = Field(default_factory=list)
    drop_leading_components: int = Field(1, ge=0)
    recompute: bool = True


class RunConfig(BaseModel):
    preset: Optional[str] = None
    seed: int = 42
    artifact_dir: str = "artifacts"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvalProtocol = Field(default_factory=EvalProtocol)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)

    def resolved_artifact_dir(self) -> Path:
        path = Path(self.artifact_dir)
        if settings.CVAE_ARTIFACT_ROOT and not path.is_absolute():
            return Path(settings.CVAE_ARTIFACT_ROOT) / path
        return path


# Published preprocessing and training parameters per dataset.
# reported_beta is the cap selected by the two-phase procedure on the full data.
DATASET_PRESETS: Dict[str, Dict[str, Any]] = {
    "ml-20m": {
        "dataset": {
            "name": "ml-20m",
            "rating_threshold": 3.5,
            "drop_categories": ["IMAX", "Film-Noir", "(no genres listed)"],
        },
        "split": {"n_heldout_val": 10_000, "n_heldout_test": 10_000, "foldin_fraction": 0.8,
                  "min_user_interactions": 5, "min_item_interactions": 1},
        "train": {"batch_size": 500, "max_epochs": 100},
        "reported_beta": 0.07,
    },
    "netflix": {
        "dataset": {
            "name": "netflix",
            "rating_threshold": 3.5,
            "drop_categories": ["Talk-Show", "Film-Noir", "Short", "Reality-TV", "News", "Game-Show"],
        },
        "split": {"n_heldout_val": 40_000, "n_heldout_test": 40_000, "foldin_fraction": 0.8,
                  "min_user_interactions": 5, "min_item_interactions": 1},
        "train": {"batch_size": 1000, "max_epochs": 100},
        "reported_beta": 0.05,
    },
    "yelp": {
        "dataset": {"name": "yelp", "rating_threshold": 3.0, "keep_top_categories": 20},
        "split": {"n_heldout_val": 4_500, "n_heldout_test": 4_500, "foldin_fraction": 0.5,
                  "min_user_interactions": 4, "min_item_interactions": 10},
        "train": {"batch_size": 500, "max_epochs": 100},
        "reported_beta": 0.35,
    },
    "fixture": {
        "dataset": {"name": "fixture", "rating_threshold": 3.0},
        "split": {"n_heldout_val": 100, "n_heldout_test": 100, "foldin_fraction": 0.8,
                  "min_user_interactions": 4, "min_item_interactions": 10},
        "model": {"hidden_dim": 200, "latent_dim": 50},
        "train": {"batch_size": 100, "max_epochs": 50, "lr": 0.003},
        "analysis": {"n_latent_users": 500, "purity_k": 20, "max_rank": 50},
        "reported_beta": None,
    },
}


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def preset_values(name: str) -> Dict[str, Any]:
    if name not in DATASET_PRESETS:
        raise ConfigError(f"unknown preset '{name}'; available: {', '.join(sorted(DATASET_PRESETS))}")
    return {k: v for k, v in DATASET_PRESETS[name].items() if k != "reported_beta"}


def build_run_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a raw config dict; a preset supplies defaults the dict can override"""
    preset = raw.get("preset")
    data = _deep_merge(preset_values(preset), raw) if preset else raw
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_run_config(path: Optional[str], preset: Optional[str] = None) -> RunConfig:
    """Read and validate a config file; ``preset`` replaces the file's preset"""
    if path is None:
        return build_run_config({"preset": preset} if preset else {})
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
    if preset:
        raw["preset"] = preset
    config = build_run_config(raw)
    logger.info(f"Loaded run config from {config_path}")
    return config


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Merge dotted-key overrides ("train.max_epochs": 3) into a config. ``None``
    values are ignored so unset CLI flags leave the file value in place.
    """
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        cursor = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
    if not nested:
        return config
    return build_run_config(_deep_merge(config.model_dump(), nested))
